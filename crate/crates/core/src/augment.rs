//! Paired geometric augmentation of (image, mask) samples: flips, rotation by
//! one of `N` equally spaced angles and isotropic scaling about the centre.
//!
//! Rotation and scaling are applied in a single inverse-mapping pass, image
//! channels bilinear and masks nearest-neighbour. Samples falling outside the
//! raster read as 0 / background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, MultiChannelImage, RngStream};

pub type Pair = (MultiChannelImage, BinaryMask);

pub const PAPER_SCALE_RANGE: (f64, f64) = (0.7, 1.4);

/// Redraws allowed per augmented sample before giving up on an empty mask.
const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Rotation index `k`; the angle is `2 pi k / rotation_count`.
    pub k: usize,
    pub rotation_count: usize,
    pub scale: f64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            flip_h: false,
            flip_v: false,
            k: 0,
            rotation_count: 32,
            scale: 1.0,
        }
    }

    pub fn validate(&self, paper_mode: bool) -> Result<()> {
        if self.rotation_count == 0 || self.k >= self.rotation_count {
            return Err(Error::invalid(format!(
                "rotation index {} out of range [0, {})",
                self.k, self.rotation_count
            )));
        }
        check_scale(self.scale, paper_mode)
    }
}

fn check_scale(lambda: f64, paper_mode: bool) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!(
            "scale factor must be positive, got {lambda}"
        )));
    }
    let (lo, hi) = PAPER_SCALE_RANGE;
    if paper_mode && !(lo..=hi).contains(&lambda) {
        return Err(Error::invalid(format!(
            "scale factor {lambda} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub per_image_count: usize,
    pub rotation_count: usize,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Cycle through rotation indices instead of sampling them.
    pub enumerate_rotations: bool,
    /// Restrict scale factors to the published [0.7, 1.4] range.
    pub paper_mode: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            per_image_count: 10,
            rotation_count: 32,
            flip_prob: 0.5,
            scale_min: 0.7,
            scale_max: 1.4,
            enumerate_rotations: false,
            paper_mode: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_image_count == 0 {
            return Err(Error::invalid("per_image_count must be >= 1"));
        }
        if self.rotation_count == 0 {
            return Err(Error::invalid("rotation_count must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if !(self.scale_min <= self.scale_max) {
            return Err(Error::invalid("scale_min must not exceed scale_max"));
        }
        check_scale(self.scale_min, self.paper_mode)?;
        check_scale(self.scale_max, self.paper_mode)
    }

    fn draw(&self, rng: &mut RngStream, index: usize) -> AugmentSpec {
        let flip_h = rng.bernoulli(self.flip_prob);
        let flip_v = rng.bernoulli(self.flip_prob);
        let k = if self.enumerate_rotations {
            index % self.rotation_count
        } else {
            rng.below(self.rotation_count as u64) as usize
        };
        let scale = rng.uniform_range(self.scale_min, self.scale_max);
        AugmentSpec {
            flip_h,
            flip_v,
            k,
            rotation_count: self.rotation_count,
            scale,
        }
    }
}

fn check_pair(img: &MultiChannelImage, mask: &BinaryMask) -> Result<()> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

pub fn flip(img: &MultiChannelImage, mask: &BinaryMask, h: bool, v: bool) -> Result<Pair> {
    check_pair(img, mask)?;
    let (w, ht) = (img.width(), img.height());
    let src = |x: usize, y: usize| {
        let sx = if h { w - 1 - x } else { x };
        let sy = if v { ht - 1 - y } else { y };
        sy * w + sx
    };
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..ht {
            for x in 0..w {
                data.push(plane[src(x, y)]);
            }
        }
    }
    let m = mask.data();
    let mdata = (0..ht)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| m[src(x, y)])
        .collect();
    Ok((
        MultiChannelImage::new(w, ht, img.channels(), data)?,
        BinaryMask::new(w, ht, mdata)?,
    ))
}

/// Cosine and sine of `2 pi k / n`, exact at multiples of a quarter turn.
fn angle(k: usize, n: usize) -> (f64, f64) {
    if (4 * k) % n == 0 {
        match (4 * k / n) % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        (t.cos(), t.sin())
    }
}

/// Rotation by the angle with cosine `cos` and sine `sin` combined with scaling
/// by `lambda`, both about the raster centre.
fn resample(
    img: &MultiChannelImage,
    mask: &BinaryMask,
    cos: f64,
    sin: f64,
    lambda: f64,
) -> Result<Pair> {
    check_pair(img, mask)?;
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let n = w * h;
    let mut data = vec![0f32; n * img.channels()];
    let mut mdata = vec![0u8; n];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map: rotate back by the angle, then undo the scaling.
            let sx = cx + (cos * dx + sin * dy) / lambda;
            let sy = cy + (-sin * dx + cos * dy) / lambda;
            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mdata[y * w + x] = mask.data()[ny as usize * w + nx as usize];
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (tx, ty, wt) in taps {
                if wt == 0.0 || tx < 0.0 || ty < 0.0 || tx as usize >= w || ty as usize >= h {
                    continue;
                }
                let si = ty as usize * w + tx as usize;
                for c in 0..img.channels() {
                    data[c * n + y * w + x] += (wt * img.plane(c)[si] as f64) as f32;
                }
            }
        }
    }
    Ok((
        MultiChannelImage::new(w, h, img.channels(), data)?,
        BinaryMask::new(w, h, mdata)?,
    ))
}

pub fn rotate(img: &MultiChannelImage, mask: &BinaryMask, k: usize, n: usize) -> Result<Pair> {
    if n == 0 || k >= n {
        return Err(Error::invalid(format!(
            "rotation index {k} out of range [0, {n})"
        )));
    }
    let (c, s) = angle(k, n);
    resample(img, mask, c, s, 1.0)
}

/// Scaling about the centre; content beyond the raster is cropped, uncovered
/// borders are zero. `lambda` must lie in [0.7, 1.4].
pub fn scale(img: &MultiChannelImage, mask: &BinaryMask, lambda: f64) -> Result<Pair> {
    check_scale(lambda, true)?;
    resample(img, mask, 1.0, 0.0, lambda)
}

/// Flip, then rotation and scaling in one resampling pass. Fails with
/// [`Error::ForegroundLost`] if a nonempty mask comes out empty.
pub fn apply(
    img: &MultiChannelImage,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    paper_mode: bool,
) -> Result<Pair> {
    spec.validate(paper_mode)?;
    let (fi, fm) = flip(img, mask, spec.flip_h, spec.flip_v)?;
    let (c, s) = angle(spec.k, spec.rotation_count);
    let out = resample(&fi, &fm, c, s, spec.scale)?;
    if !mask.is_empty() && out.1.is_empty() {
        return Err(Error::ForegroundLost(format!(
            "{spec:?} moves the whole mask out of frame"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub source: usize,
    pub spec: AugmentSpec,
    pub image: MultiChannelImage,
    pub mask: BinaryMask,
}

/// `per_image_count` augmentations of every source pair. Source `i` draws
/// from stream `i` derived from `rng`, so results do not depend on the
/// processing order.
pub fn augment_dataset(
    pairs: &[Pair],
    rng: &RngStream,
    cfg: &AugmentConfig,
) -> Result<Vec<Augmented>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid(
            "augment_dataset needs at least one source pair",
        ));
    }
    let mut out = Vec::with_capacity(pairs.len() * cfg.per_image_count);
    for (i, (img, mask)) in pairs.iter().enumerate() {
        let mut r = rng.derive(i as u64);
        for j in 0..cfg.per_image_count {
            let mut attempt = 0;
            loop {
                let spec = cfg.draw(&mut r, j);
                match apply(img, mask, &spec, cfg.paper_mode) {
                    Ok((image, mask)) => {
                        out.push(Augmented {
                            source: i,
                            spec,
                            image,
                            mask,
                        });
                        break;
                    }
                    Err(Error::ForegroundLost(msg)) => {
                        attempt += 1;
                        if attempt > MAX_REDRAWS {
                            return Err(Error::ForegroundLost(format!(
                                "source {i}: {MAX_REDRAWS} redraws failed, last: {msg}"
                            )));
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}
