//! Overlap and contour metrics between binary masks, plus the summary and
//! rank-correlation helpers used in evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{check_same_dims, BinaryMask};
use crate::morph::{has_far, squared_distance_to};

fn overlap(x: &BinaryMask, y: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_same_dims(x, y)?;
    let (mut inter, mut cx, mut cy) = (0, 0, 0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        cx += a as usize;
        cy += b as usize;
    }
    Ok((inter, cx, cy))
}

/// `2|X∩Y| / (|X|+|Y|)`; two empty masks score 1.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (inter, cx, cy) = overlap(x, y)?;
    if cx + cy == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (cx + cy) as f64)
}

/// `|X∩Y| / |X∪Y|`; two empty masks score 1.
pub fn iou(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (inter, cx, cy) = overlap(x, y)?;
    let union = cx + cy - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Largest squared distance from a pixel of `from` to the set `to`.
fn directed_sq(from: &BinaryMask, to: &BinaryMask) -> f64 {
    let feats: Vec<bool> = to.data().iter().map(|&v| v != 0).collect();
    let d2 = squared_distance_to(&feats, to.width(), to.height());
    from.data()
        .iter()
        .zip(&d2)
        .filter(|(&v, _)| v != 0)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the foreground pixel centres, or
/// `None` when either mask is empty.
pub fn hausdorff(x: &BinaryMask, y: &BinaryMask) -> Result<Option<f64>> {
    check_same_dims(x, y)?;
    if x.is_empty() || y.is_empty() {
        return Ok(None);
    }
    let d2 = directed_sq(x, y).max(directed_sq(y, x));
    debug_assert!(!has_far(d2));
    Ok(Some(d2.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    /// `None` when either mask is empty.
    pub hausdorff: Option<f64>,
}

pub fn evaluate_pair(pred: &BinaryMask, truth: &BinaryMask) -> Result<MetricReport> {
    Ok(MetricReport {
        dice: dice(pred, truth)?,
        iou: iou(pred, truth)?,
        hausdorff: hausdorff(pred, truth)?,
    })
}

/// Mean, population standard deviation, min and max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Summary {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("spearman undefined for constant input"));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RngStream;
    use proptest::prelude::*;

    fn random_mask(rng: &mut RngStream, w: usize, h: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, _| rng.bernoulli(p))
    }

    /// Pairwise search over both point sets.
    fn brute_hausdorff(x: &BinaryMask, y: &BinaryMask) -> f64 {
        let xs: Vec<(i64, i64)> = x.foreground().map(|(a, b)| (a as i64, b as i64)).collect();
        let ys: Vec<(i64, i64)> = y.foreground().map(|(a, b)| (a as i64, b as i64)).collect();
        let directed = |p: &[(i64, i64)], q: &[(i64, i64)]| {
            p.iter()
                .map(|a| {
                    q.iter()
                        .map(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2))
                        .min()
                        .unwrap()
                })
                .max()
                .unwrap()
        };
        (directed(&xs, &ys).max(directed(&ys, &xs)) as f64).sqrt()
    }

    #[test]
    fn analytic_overlaps() {
        let x = BinaryMask::from_fn(20, 10, |c, _| c < 10);
        let y = BinaryMask::from_fn(20, 10, |c, r| (5..15).contains(&c) && r < 10);
        assert_eq!(dice(&x, &y).unwrap(), 0.5);
        assert!((iou(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&x, &x).unwrap(), 1.0);
        let z = BinaryMask::from_fn(20, 10, |c, _| c >= 15);
        assert_eq!(dice(&x, &z).unwrap(), 0.0);
        assert_eq!(iou(&x, &z).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::empty(4, 4);
        let f = BinaryMask::from_fn(4, 4, |x, _| x == 0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &f).unwrap(), 0.0);
        assert_eq!(hausdorff(&e, &f).unwrap(), None);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(dice(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 4)).is_err());
        assert!(hausdorff(&BinaryMask::empty(3, 3), &BinaryMask::empty(4, 3)).is_err());
    }

    #[test]
    fn hausdorff_345() {
        let x = BinaryMask::from_fn(8, 8, |a, b| a == 0 && b == 0);
        let y = BinaryMask::from_fn(8, 8, |a, b| a == 3 && b == 4);
        assert_eq!(hausdorff(&x, &y).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&x, &x).unwrap(), Some(0.0));
    }

    #[test]
    fn hausdorff_matches_pairwise() {
        let mut rng = RngStream::new(17, 0);
        for p in [0.02, 0.2, 0.6] {
            let x = random_mask(&mut rng, 40, 30, p);
            let y = random_mask(&mut rng, 40, 30, p);
            assert_eq!(hausdorff(&x, &y).unwrap().unwrap(), brute_hausdorff(&x, &y));
        }
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Closed form 1 - 6 sum d^2 / (n (n^2 - 1)) without ties.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        let expected = 1.0 - 6.0 * 4.0 / (5.0 * 24.0);
        assert!((spearman(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summary_stats() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (2.5, 1.0, 4.0, 4));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(summarize(&[]).is_none());
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(prop::bool::weighted(0.3), 12 * 9)
            .prop_map(|v| BinaryMask::new(12, 9, v.into_iter().map(u8::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn dice_iou_identity(x in mask_strategy(), y in mask_strategy()) {
            let (d, j) = (dice(&x, &y).unwrap(), iou(&x, &y).unwrap());
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
            prop_assert_eq!(d, dice(&y, &x).unwrap());
            prop_assert_eq!(j, iou(&y, &x).unwrap());
        }

        #[test]
        fn hausdorff_metric_axioms(x in mask_strategy(), y in mask_strategy(), z in mask_strategy()) {
            prop_assume!(!x.is_empty() && !y.is_empty() && !z.is_empty());
            let h = |a: &BinaryMask, b: &BinaryMask| hausdorff(a, b).unwrap().unwrap();
            prop_assert_eq!(h(&x, &y), h(&y, &x));
            prop_assert_eq!(h(&x, &y) == 0.0, x == y);
            prop_assert!(h(&x, &z) <= h(&x, &y) + h(&y, &z) + 1e-9);
        }
    }
}
