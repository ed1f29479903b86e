//! Contrast limited adaptive histogram equalization.
//!
//! The image is cut into `tile x tile` blocks (the last row/column of tiles
//! may be smaller). Each tile gets a 256-bin histogram, clipped at
//! `clip * pixels / 256` with the excess spread evenly over all bins in a
//! single pass; its mapping is the inclusive CDF divided by the pixel count.
//! A tile whose pixels all fall into one bin has no contrast to equalize and
//! maps values to themselves. Pixels blend the mappings of the four nearest
//! tile centres bilinearly; beyond the outermost centres the nearest tiles
//! are used.

use super::PreprocConfig;
use crate::error::{Error, Result};
use crate::imagecore::Image;

const BINS: usize = 256;

#[inline]
pub(crate) fn bin_of(v: f32) -> usize {
    ((v as f64 * BINS as f64).floor() as isize).clamp(0, BINS as isize - 1) as usize
}

enum TileMap {
    Identity,
    Lut([f32; BINS]),
}

impl TileMap {
    #[inline]
    fn apply(&self, v: f32) -> f64 {
        match self {
            TileMap::Identity => v as f64,
            TileMap::Lut(lut) => lut[bin_of(v)] as f64,
        }
    }
}

fn tile_map(values: impl Iterator<Item = f32>, clip: f64) -> TileMap {
    let mut hist = [0f64; BINS];
    let mut n = 0usize;
    for v in values {
        hist[bin_of(v)] += 1.0;
        n += 1;
    }
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return TileMap::Identity;
    }
    let limit = clip * n as f64 / BINS as f64;
    let mut excess = 0f64;
    for c in hist.iter_mut() {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let share = excess / BINS as f64;
    let mut lut = [0f32; BINS];
    let mut acc = 0f64;
    for (b, c) in hist.iter().enumerate() {
        acc += c + share;
        lut[b] = (acc / n as f64).min(1.0) as f32;
    }
    TileMap::Lut(lut)
}

/// Tile boundaries along one axis and the tile centres.
fn tiling(len: usize, tile: usize) -> (Vec<(usize, usize)>, Vec<f64>) {
    let count = len.div_ceil(tile);
    let bounds: Vec<(usize, usize)> = (0..count)
        .map(|i| (i * tile, ((i + 1) * tile).min(len)))
        .collect();
    let centres = bounds
        .iter()
        .map(|&(a, b)| (a + b - 1) as f64 / 2.0)
        .collect();
    (bounds, centres)
}

/// Index pair and blend weight of the two tiles bracketing `pos`.
fn bracket(pos: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if pos <= centres[0] {
        return (0, 0, 0.0);
    }
    if pos >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.partition_point(|&c| c <= pos) - 1;
    let t = (pos - centres[i]) / (centres[i + 1] - centres[i]);
    (i, i + 1, t)
}

pub fn clahe(img: &Image, cfg: &PreprocConfig) -> Result<Image> {
    img.require_normalized("clahe")?;
    let (w, h) = (img.width(), img.height());
    let tile = cfg.clahe_tile;
    if tile == 0 || tile > w || tile > h {
        return Err(Error::invalid(format!(
            "clahe tile size {tile} > image size {w}x{h}"
        )));
    }
    if !(cfg.clahe_clip >= 1.0) {
        return Err(Error::invalid(format!(
            "clahe clip limit must be >= 1, got {}",
            cfg.clahe_clip
        )));
    }
    let (xb, xc) = tiling(w, tile);
    let (yb, yc) = tiling(h, tile);
    let maps: Vec<TileMap> = yb
        .iter()
        .flat_map(|&(y0, y1)| xb.iter().map(move |&(x0, x1)| (x0, x1, y0, y1)))
        .map(|(x0, x1, y0, y1)| {
            let vals = (y0..y1).flat_map(|y| (x0..x1).map(move |x| img.get(x, y)));
            tile_map(vals, cfg.clahe_clip as f64)
        })
        .collect();
    let tx = xb.len();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let (j0, j1, ty) = bracket(y as f64, &yc);
        for x in 0..w {
            let (i0, i1, fx) = bracket(x as f64, &xc);
            let v = img.get(x, y);
            let top = (1.0 - fx) * maps[j0 * tx + i0].apply(v) + fx * maps[j0 * tx + i1].apply(v);
            let bot = (1.0 - fx) * maps[j1 * tx + i0].apply(v) + fx * maps[j1 * tx + i1].apply(v);
            data.push((((1.0 - ty) * top + ty * bot) as f32).clamp(0.0, 1.0));
        }
    }
    Image::new_normalized(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RngStream;

    fn cfg(tile: usize, clip: f32) -> PreprocConfig {
        PreprocConfig {
            clahe_tile: tile,
            clahe_clip: clip,
            ..Default::default()
        }
    }

    /// Scalar restatement of the single-tile mapping used as the oracle.
    fn reference_single_tile(values: &[f32], clip: f64) -> Vec<f64> {
        let n = values.len() as f64;
        let mut hist = vec![0f64; 256];
        for &v in values {
            let b = ((v as f64 * 256.0) as usize).min(255);
            hist[b] += 1.0;
        }
        let occupied = hist.iter().filter(|c| **c > 0.0).count();
        if occupied <= 1 {
            return values.iter().map(|&v| v as f64).collect();
        }
        let limit = clip * n / 256.0;
        let excess: f64 = hist.iter().map(|c| (c - limit).max(0.0)).sum();
        let clipped: Vec<f64> = hist.iter().map(|c| c.min(limit) + excess / 256.0).collect();
        values
            .iter()
            .map(|&v| {
                let b = ((v as f64 * 256.0) as usize).min(255);
                clipped[..=b].iter().sum::<f64>() / n
            })
            .collect()
    }

    #[test]
    fn constant_image_maps_to_itself() {
        let img = Image::new_normalized(16, 16, vec![0.3; 256]).unwrap();
        let out = clahe(&img, &cfg(8, 2.0)).unwrap();
        let oracle = reference_single_tile(&[0.3], 2.0)[0] as f32;
        assert!(out.data().iter().all(|&v| v == oracle));
        assert_eq!(oracle, 0.3);
    }

    #[test]
    fn two_levels_follow_cdf() {
        let img = Image::from_fn(16, 16, |x, _| if x < 8 { 0.4 } else { 0.6 });
        let out = clahe(&img, &cfg(16, 256.0)).unwrap();
        assert!((out.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((out.get(15, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_tile_matches_reference() {
        let mut rng = RngStream::new(12, 0);
        let vals: Vec<f32> = (0..400)
            .map(|_| (rng.uniform() * rng.uniform()) as f32)
            .collect();
        let img = Image::new_normalized(20, 20, vals.clone()).unwrap();
        for clip in [1.0, 2.0, 4.0] {
            let out = clahe(&img, &cfg(20, clip as f32)).unwrap();
            let oracle = reference_single_tile(&vals, clip);
            for (a, b) in out.data().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    /// Every 16x16 tile holds each of the 256 levels once, so its histogram
    /// is already flat and clip 1.0 leaves a linear CDF.
    #[test]
    fn full_clipping_is_near_identity() {
        let img = Image::from_fn(64, 64, |x, y| {
            ((x % 16 + 16 * (y % 16)) as f32 + 0.5) / 256.0
        });
        let out = clahe(&img, &cfg(16, 1.0)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 256.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_large_tile() {
        let img = Image::zeros(8, 8);
        assert!(clahe(&img, &cfg(9, 2.0)).is_err());
    }

    #[test]
    fn blends_between_tiles() {
        let img = Image::from_fn(32, 32, |x, y| ((x + y) % 32) as f32 / 32.0);
        let out = clahe(&img, &cfg(16, 2.0)).unwrap();
        assert!(out.is_normalized());
        assert_eq!(out.width(), 32);
    }

    #[test]
    fn bracket_edges() {
        let c = [7.5, 23.5];
        assert_eq!(bracket(0.0, &c), (0, 0, 0.0));
        assert_eq!(bracket(30.0, &c), (1, 1, 0.0));
        let (i, j, t) = bracket(15.5, &c);
        assert_eq!((i, j), (0, 1));
        assert!((t - 0.5).abs() < 1e-12);
    }
}
