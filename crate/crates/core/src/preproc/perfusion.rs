use super::{normalize, PreprocConfig};
use crate::error::{Error, Result};
use crate::imagecore::{FrameStack, Image};

/// Per-pixel population standard deviation across frames.
///
/// The result is not normalized; with frames in `[0, 1]` it lies in `[0, 0.5]`.
pub fn perfusion_map(stack: &FrameStack) -> Result<Image> {
    let n = stack.frames();
    if n < 2 {
        return Err(Error::invalid(format!("need >=2 frames, got {n}")));
    }
    let px = stack.width() * stack.height();
    let mut mean = vec![0f64; px];
    for f in 0..n {
        for (m, &v) in mean.iter_mut().zip(stack.frame(f)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; px];
    for f in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(stack.frame(f)).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let data = var.iter().map(|s| (s / n as f64).sqrt() as f32).collect();
    Image::new(stack.width(), stack.height(), data)
}

/// Frame average (raw intensities).
pub fn mean_frame(stack: &FrameStack) -> Image {
    let n = stack.frames();
    let px = stack.width() * stack.height();
    let mut sum = vec![0f64; px];
    for f in 0..n {
        for (s, &v) in sum.iter_mut().zip(stack.frame(f)) {
            *s += v as f64;
        }
    }
    let data = sum.into_iter().map(|s| (s / n as f64) as f32).collect();
    Image::new(stack.width(), stack.height(), data).expect("dimensions come from a valid stack")
}

/// Mean over the `(2r+1)^2` window centred on each pixel, restricted to
/// pixels inside the raster.
pub fn local_mean(img: &Image, radius: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    // Summed-area table with a zero row/column in front.
    let mut sat = vec![0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += img.get(x, y) as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let x0 = x.saturating_sub(radius);
            let y0 = y.saturating_sub(radius);
            let x1 = (x + radius + 1).min(w);
            let y1 = (y + radius + 1).min(h);
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            (s / ((x1 - x0) * (y1 - y0)) as f64) as f32
        })
        .collect();
    img.with_data(data)
}

/// Structural channel: frame mean -> normalize -> invert -> local mean ->
/// normalize.
pub fn enhance_aoslo(stack: &FrameStack, cfg: &PreprocConfig) -> Result<Image> {
    if cfg.localmean_radius < 1 {
        return Err(Error::invalid("localmean_radius must be >= 1"));
    }
    let mean = normalize(&mean_frame(stack))?;
    let inverted = mean.with_data(mean.data().iter().map(|v| 1.0 - v).collect());
    normalize(&local_mean(&inverted, cfg.localmean_radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RngStream;

    #[test]
    fn constant_stack_has_zero_perfusion() {
        let stack = FrameStack::new(3, 3, 4, vec![0.42; 36]).unwrap();
        assert!(perfusion_map(&stack)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn two_frame_population_std() {
        let stack = FrameStack::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(perfusion_map(&stack).unwrap().data(), &[0.5]);
    }

    /// Independent two-pass estimate over a uniform noise stack; the
    /// expectation is sqrt(1/12).
    #[test]
    fn uniform_noise_std() {
        let (w, h, n) = (16, 16, 75);
        let mut rng = RngStream::new(11, 0);
        let data: Vec<f32> = (0..w * h * n).map(|_| rng.uniform() as f32).collect();
        let stack = FrameStack::new(w, h, n, data.clone()).unwrap();
        let perf = perfusion_map(&stack).unwrap();
        let expected = (1.0f64 / 12.0).sqrt();
        for p in 0..w * h {
            let samples: Vec<f64> = (0..n).map(|f| data[f * w * h + p] as f64).collect();
            let m = samples.iter().sum::<f64>() / n as f64;
            let oracle = (samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            let got = perf.data()[p] as f64;
            assert!((got - oracle).abs() < 1e-6);
            assert!((got - expected).abs() < 0.05, "pixel {p}: {got}");
        }
    }

    #[test]
    fn perfusion_invariant_to_order_and_shift() {
        let mut rng = RngStream::new(2, 0);
        let frames: Vec<Image> = (0..6)
            .map(|_| Image::from_fn(5, 4, |_, _| rng.uniform() as f32 * 0.5))
            .collect();
        let base = perfusion_map(&FrameStack::from_frames(&frames).unwrap()).unwrap();
        let mut reordered = frames.clone();
        reordered.reverse();
        reordered.swap(0, 3);
        let r = perfusion_map(&FrameStack::from_frames(&reordered).unwrap()).unwrap();
        let shifted: Vec<Image> = frames
            .iter()
            .map(|f| Image::new(5, 4, f.data().iter().map(|v| v + 0.25).collect()).unwrap())
            .collect();
        let s = perfusion_map(&FrameStack::from_frames(&shifted).unwrap()).unwrap();
        for i in 0..20 {
            assert!((base.data()[i] - r.data()[i]).abs() < 1e-6);
            assert!((base.data()[i] - s.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn enhance_constant_stack_is_zero() {
        let stack = FrameStack::new(8, 8, 3, vec![0.6; 192]).unwrap();
        let out = enhance_aoslo(&stack, &PreprocConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_inverts_bright_disk() {
        let (w, h) = (32, 32);
        let disk = |x: usize, y: usize| {
            let (dx, dy) = (x as f32 - 15.5, y as f32 - 15.5);
            if dx * dx + dy * dy <= 64.0 {
                0.9
            } else {
                0.2
            }
        };
        let frames: Vec<Image> = (0..3).map(|_| Image::from_fn(w, h, disk)).collect();
        let out = enhance_aoslo(
            &FrameStack::from_frames(&frames).unwrap(),
            &PreprocConfig::default(),
        )
        .unwrap();
        assert!(out.get(16, 16) < 0.05);
        assert!(out.get(2, 2) > 0.95);
    }

    #[test]
    fn local_mean_spreads_impulse() {
        let img = Image::from_fn(11, 11, |x, y| if x == 5 && y == 5 { 1.0 } else { 0.0 });
        let out = local_mean(&img, 2);
        for y in 0..11 {
            for x in 0..11 {
                let inside = (3..=7).contains(&x) && (3..=7).contains(&y);
                let expect = if inside { 1.0 / 25.0 } else { 0.0 };
                assert!((out.get(x, y) - expect).abs() < 1e-7, "({x},{y})");
            }
        }
    }
}
