//! Exact Euclidean distance transform by separable lower envelopes of
//! parabolas (one pass over columns, one over rows).

use crate::imagecore::BinaryMask;

/// Stand-in for "no feature pixel on this line". Large enough to dominate any
/// real squared distance, small enough to keep the envelope arithmetic finite.
const FAR: f64 = 1e20;

/// 1-D squared distance transform of the sampled function `f`, in place.
fn envelope_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    f.copy_from_slice(out);
}

/// Squared distance from every pixel to the nearest `feature` pixel, with no
/// pixels assumed outside the raster. Rasters without any feature give
/// values of at least `FAR`.
pub(crate) fn squared_distance_to(features: &[bool], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(features.len(), width * height);
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { FAR })
        .collect();
    let n = width.max(height);
    let (mut v, mut z, mut out) = (vec![0usize; n], vec![0f64; n + 1], vec![0f64; n]);
    let mut col = vec![0f64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        envelope_1d(&mut col, &mut v, &mut z, &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = col[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        envelope_1d(row, &mut v, &mut z, &mut out[..width]);
    }
    grid
}

pub(crate) fn has_far(d2: f64) -> bool {
    d2 >= FAR * 0.5
}

/// Per-pixel Euclidean distance to the nearest background pixel; background
/// pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DistanceField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Exact EDT to the nearest background pixel of the raster. A mask without
/// any background pixel is measured against a virtual background ring just
/// outside the raster instead.
pub fn distance_transform(mask: &BinaryMask) -> DistanceField {
    let (w, h) = (mask.width(), mask.height());
    if mask.count() < w * h {
        let background: Vec<bool> = mask.data().iter().map(|&v| v == 0).collect();
        let data = squared_distance_to(&background, w, h)
            .into_iter()
            .map(f64::sqrt)
            .collect();
        return DistanceField {
            width: w,
            height: h,
            data,
        };
    }
    let (pw, ph) = (w + 2, h + 2);
    let mut background = vec![true; pw * ph];
    for y in 0..h {
        for x in 0..w {
            background[(y + 1) * pw + x + 1] = false;
        }
    }
    let d2 = squared_distance_to(&background, pw, ph);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(d2[(y + 1) * pw + x + 1].sqrt());
        }
    }
    DistanceField {
        width: w,
        height: h,
        data,
    }
}
