//! Segmentation losses. Sums are accumulated in `f64` whatever the tensor
//! scalar type.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;
use crate::morph::{has_far, squared_distance_to};

/// Probability clamp used inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Soft-Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub bce: f64,
    pub soft_dice: f64,
    pub hausdorff: f64,
    pub total: f64,
}

/// Flattens a batch of masks to `0/1` values laid out like a
/// `(batch, 1, H, W)` tensor.
pub(crate) fn flatten_targets(shape: [usize; 4], targets: &[BinaryMask]) -> Result<Vec<u8>> {
    let [n, c, h, w] = shape;
    if c != 1 || targets.len() != n || targets.iter().any(|m| m.width() != w || m.height() != h) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {shape:?} does not match {} target masks",
            targets.len()
        )));
    }
    Ok(targets
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect())
}

fn soft_dice_terms<S: Scalar>(pred: &[S], target: &[u8]) -> (f64, f64, f64) {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.as_f64();
        let y = y as f64;
        inter += p * y;
        sp += p;
        sy += y;
    }
    let den = sp + sy + DICE_SMOOTH;
    (
        (2.0 * inter + DICE_SMOOTH) / den,
        2.0 * inter + DICE_SMOOTH,
        den,
    )
}

fn bce_mean<S: Scalar>(pred: &[S], target: &[u8]) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let x = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= if y != 0 { x.ln() } else { (1.0 - x).ln() };
    }
    s / pred.len() as f64
}

/// `BCE_mean + alpha * (1 - softDice)` over the whole batch and its gradient
/// with respect to the probabilities. Clamped probabilities get zero BCE
/// gradient.
pub fn bce_dice<S: Scalar>(
    pred: &Tensor<S>,
    targets: &[BinaryMask],
    alpha: f64,
) -> Result<(LossParts, Vec<S>)> {
    let y = flatten_targets(pred.shape(), targets)?;
    let p = pred.data();
    let n = p.len() as f64;
    let bce = bce_mean(p, &y);
    let (dice, num, den) = soft_dice_terms(p, &y);
    let grad = p
        .iter()
        .zip(&y)
        .map(|(&pi, &yi)| {
            let x = pi.as_f64();
            let yi = yi as f64;
            let gb = if x < BCE_EPS || x > 1.0 - BCE_EPS {
                0.0
            } else {
                (-yi / x + (1.0 - yi) / (1.0 - x)) / n
            };
            let gd = -alpha * (2.0 * yi * den - num) / (den * den);
            S::from_f64(gb + gd)
        })
        .collect();
    let parts = LossParts {
        bce,
        soft_dice: dice,
        hausdorff: 0.0,
        total: bce + alpha * (1.0 - dice),
    };
    Ok((parts, grad))
}

/// Distance from each pixel to the nearest pixel of the opposite target
/// class, per `(w, h)` plane. Planes with a single class use the raster
/// diagonal.
fn opposite_class_distance2(target: &[u8], w: usize, h: usize) -> Vec<f64> {
    let cap = (w * w + h * h) as f64;
    let mut out = Vec::with_capacity(target.len());
    for plane in target.chunks(w * h) {
        let fg: Vec<bool> = plane.iter().map(|&v| v != 0).collect();
        let bg: Vec<bool> = fg.iter().map(|&v| !v).collect();
        let to_fg = squared_distance_to(&fg, w, h);
        let to_bg = squared_distance_to(&bg, w, h);
        for (i, &f) in fg.iter().enumerate() {
            let d2 = if f { to_bg[i] } else { to_fg[i] };
            out.push(if has_far(d2) { cap } else { d2 });
        }
    }
    out
}

/// Distance-weighted penalty on misclassified pixels: the mean, over pixels
/// whose 0.5-thresholded prediction disagrees with the target, of
/// `(p - y)^2 * D^2` with `D` the distance to the opposite target class.
/// The disagreement band is treated as constant for the gradient.
pub fn hausdorff_surrogate<S: Scalar>(
    pred: &Tensor<S>,
    targets: &[BinaryMask],
) -> Result<(f64, Vec<S>)> {
    let y = flatten_targets(pred.shape(), targets)?;
    let [_, _, h, w] = pred.shape();
    let d2 = opposite_class_distance2(&y, w, h);
    let p = pred.data();
    let band: Vec<bool> = p
        .iter()
        .zip(&y)
        .map(|(&pi, &yi)| (pi.as_f64() >= 0.5) != (yi != 0))
        .collect();
    let count = band.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok((0.0, vec![S::zero(); p.len()]));
    }
    let m = count as f64;
    let mut loss = 0.0;
    let grad = (0..p.len())
        .map(|i| {
            if !band[i] {
                return S::zero();
            }
            let e = p[i].as_f64() - y[i] as f64;
            loss += e * e * d2[i];
            S::from_f64(2.0 * e * d2[i] / m)
        })
        .collect();
    Ok((loss / m, grad))
}

/// Training objective on logits `z` with `p = sigmoid(z)`: returns the
/// loss parts, the probabilities, and the gradient with respect to `z`.
///
/// The BCE gradient is taken as `(p - y) / N`, the unclamped limit, so
/// saturated pixels on the wrong side keep learning.
pub(crate) fn objective<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[BinaryMask],
    alpha: f64,
    hausdorff_weight: f64,
) -> Result<(LossParts, Tensor<S>, Vec<S>)> {
    let y = flatten_targets(logits.shape(), targets)?;
    let probs: Vec<S> = logits
        .data()
        .iter()
        .map(|&z| S::one() / (S::one() + (-z).exp()))
        .collect();
    let probs = Tensor::new(logits.shape(), probs)?;
    let p = probs.data();
    let n = p.len() as f64;
    let bce = bce_mean(p, &y);
    let (dice, num, den) = soft_dice_terms(p, &y);
    let mut dz: Vec<f64> = p
        .iter()
        .zip(&y)
        .map(|(&pi, &yi)| {
            let x = pi.as_f64();
            let yi = yi as f64;
            let gd = -alpha * (2.0 * yi * den - num) / (den * den);
            (x - yi) / n + gd * x * (1.0 - x)
        })
        .collect();
    let mut hd = 0.0;
    if hausdorff_weight > 0.0 {
        let (l, g) = hausdorff_surrogate(&probs, targets)?;
        hd = l;
        for ((d, gi), &pi) in dz.iter_mut().zip(g).zip(p) {
            let x = pi.as_f64();
            *d += hausdorff_weight * gi.as_f64() * x * (1.0 - x);
        }
    }
    let parts = LossParts {
        bce,
        soft_dice: dice,
        hausdorff: hd,
        total: bce + alpha * (1.0 - dice) + hausdorff_weight * hd,
    };
    Ok((parts, probs, dz.into_iter().map(S::from_f64).collect()))
}
