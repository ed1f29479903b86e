//! Non-local means denoising.
//!
//! Each pixel becomes a weighted average over a `(2s+1)^2` search window,
//! weighted by `exp(-max(d^2 - 2 sigma^2, 0) / h^2)` where `d^2` is the mean
//! squared difference between the `(2p+1)^2` patches around the two pixels.
//! Borders are mirror-reflected (without repeating the edge pixel).
//!
//! [`nlm_denoise`] computes patch distances for one search offset at a time
//! with a summed-area table, so the cost is `O(N s^2)` instead of
//! `O(N s^2 p^2)`. [`nlm_denoise_bruteforce`] is the direct definition.

use super::PreprocConfig;
use crate::error::{Error, Result};
use crate::imagecore::Image;

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

struct Params {
    p: usize,
    s: usize,
    inv_h2: f64,
    two_sigma2: f64,
}

fn params(img: &Image, cfg: &PreprocConfig) -> Result<Params> {
    img.require_finite("nlm_denoise")?;
    let (p, s) = (cfg.nlm_patch_radius, cfg.nlm_search_radius);
    if p < 1 || s < 1 {
        return Err(Error::invalid("nlm radii must be >= 1"));
    }
    let half = img.width().min(img.height()) / 2;
    if p + s > half {
        return Err(Error::invalid(format!(
            "nlm patch radius {p} + search radius {s} exceed image half-size {half}"
        )));
    }
    if !(cfg.nlm_h > 0.0) {
        return Err(Error::invalid("nlm_h must be > 0"));
    }
    let h = cfg.nlm_h as f64;
    let sigma = cfg.nlm_sigma as f64;
    Ok(Params {
        p,
        s,
        inv_h2: 1.0 / (h * h),
        two_sigma2: 2.0 * sigma * sigma,
    })
}

/// Mirror-padded copy in f64 with `pad` extra pixels on each side.
fn padded(img: &Image, pad: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - pad as isize, w);
            out.push(img.get(sx, sy) as f64);
        }
    }
    (out, pw, ph)
}

fn finish(img: &Image, num: &[f64], den: &[f64]) -> Image {
    let data = num
        .iter()
        .zip(den)
        .map(|(n, d)| ((n / d) as f32).clamp(0.0, 1.0))
        .collect();
    img.with_data(data)
}

/// Integral-image NLM; equal to [`nlm_denoise_bruteforce`] up to rounding.
pub fn nlm_denoise(img: &Image, cfg: &PreprocConfig) -> Result<Image> {
    let prm = params(img, cfg)?;
    let (w, h) = (img.width(), img.height());
    let pad = prm.p + prm.s;
    let (src, pw, _) = padded(img, pad);
    let patch_n = ((2 * prm.p + 1) * (2 * prm.p + 1)) as f64;

    // Region over which squared differences are needed: centres +- p.
    let (rw, rh) = (w + 2 * prm.p, h + 2 * prm.p);
    let off = prm.s; // padded index of region origin
    let mut sat = vec![0f64; (rw + 1) * (rh + 1)];
    let mut num = vec![0f64; w * h];
    let mut den = vec![0f64; w * h];
    let s = prm.s as isize;
    let k = 2 * prm.p + 1;

    for dy in -s..=s {
        for dx in -s..=s {
            for y in 0..rh {
                let py = y + off;
                let qy = (py as isize + dy) as usize;
                let mut row = 0f64;
                for x in 0..rw {
                    let px = x + off;
                    let qx = (px as isize + dx) as usize;
                    let d = src[py * pw + px] - src[qy * pw + qx];
                    row += d * d;
                    sat[(y + 1) * (rw + 1) + x + 1] = sat[y * (rw + 1) + x + 1] + row;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    // Patch around centre (x, y) spans region [x, x+k) x [y, y+k).
                    let ssd = sat[(y + k) * (rw + 1) + x + k]
                        - sat[y * (rw + 1) + x + k]
                        - sat[(y + k) * (rw + 1) + x]
                        + sat[y * (rw + 1) + x];
                    let d2 = (ssd / patch_n).max(0.0);
                    let wgt = (-(d2 - prm.two_sigma2).max(0.0) * prm.inv_h2).exp();
                    let qy = (y + pad) as isize + dy;
                    let qx = (x + pad) as isize + dx;
                    let v = src[qy as usize * pw + qx as usize];
                    num[y * w + x] += wgt * v;
                    den[y * w + x] += wgt;
                }
            }
        }
    }
    Ok(finish(img, &num, &den))
}

/// Direct `O(N s^2 p^2)` evaluation of the same filter.
pub fn nlm_denoise_bruteforce(img: &Image, cfg: &PreprocConfig) -> Result<Image> {
    let prm = params(img, cfg)?;
    let (w, h) = (img.width(), img.height());
    let at = |x: isize, y: isize| img.get(reflect(x, w), reflect(y, h)) as f64;
    let (p, s) = (prm.p as isize, prm.s as isize);
    let patch_n = ((2 * p + 1) * (2 * p + 1)) as f64;
    let mut num = vec![0f64; w * h];
    let mut den = vec![0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -s..=s {
                for dx in -s..=s {
                    let mut ssd = 0f64;
                    for j in -p..=p {
                        for i in -p..=p {
                            let d = at(x + i, y + j) - at(x + dx + i, y + dy + j);
                            ssd += d * d;
                        }
                    }
                    let d2 = ssd / patch_n;
                    let wgt = (-(d2 - prm.two_sigma2).max(0.0) * prm.inv_h2).exp();
                    let idx = y as usize * w + x as usize;
                    num[idx] += wgt * at(x + dx, y + dy);
                    den[idx] += wgt;
                }
            }
        }
    }
    Ok(finish(img, &num, &den))
}
