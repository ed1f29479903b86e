//! Probability maps to clean binary masks: thresholding, removal of small
//! fragments, and union of the best models' outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{check_same_dims, BinaryMask, Image};

/// Post-processing settings. `clear_before_union` switches to clearing each
/// model's mask before the union instead of clearing the union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub threshold: f32,
    pub min_area: usize,
    pub ensemble: bool,
    pub clear_before_union: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            threshold: 0.5,
            min_area: 1024,
            ensemble: true,
            clear_before_union: false,
        }
    }
}

/// Pixel is foreground iff `value >= threshold`.
pub fn binarize(prob: &Image, threshold: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside [0,1]"
        )));
    }
    prob.require_finite("binarize")?;
    let data = prob
        .data()
        .iter()
        .map(|&v| (v >= threshold) as u8)
        .collect();
    BinaryMask::new(prob.width(), prob.height(), data)
}

/// 8-connected component labelling. Labels run `1..=n` in the raster order of
/// each component's first pixel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledComponents {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    /// `areas[i]` is the pixel count of label `i + 1`.
    pub areas: Vec<usize>,
}

impl LabeledComponents {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    /// Mask of the pixels carrying `label`.
    pub fn component_mask(&self, label: u32) -> BinaryMask {
        let data = self.labels.iter().map(|&l| (l == label) as u8).collect();
        BinaryMask::new(self.width, self.height, data).expect("labels match dimensions")
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling with 8-connectivity.
pub fn connected_components(mask: &BinaryMask) -> LabeledComponents {
    let (w, h) = (mask.width(), mask.height());
    let mut prov = vec![0u32; w * h];
    // parent[0] is the background sentinel.
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut label = 0u32;
            // Already-visited neighbours: W, NW, N, NE.
            let neigh = [
                (x > 0).then(|| (x - 1, y)),
                (x > 0 && y > 0).then(|| (x - 1, y - 1)),
                (y > 0).then(|| (x, y - 1)),
                (y > 0 && x + 1 < w).then(|| (x + 1, y - 1)),
            ];
            for (nx, ny) in neigh.into_iter().flatten() {
                let l = prov[ny * w + nx];
                if l == 0 {
                    continue;
                }
                if label == 0 {
                    label = l;
                } else {
                    union(&mut parent, label, l);
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            prov[y * w + x] = label;
        }
    }
    // Final labels in order of first appearance in the raster scan.
    let mut remap = vec![0u32; parent.len()];
    let mut areas = Vec::new();
    let mut labels = vec![0u32; w * h];
    for i in 0..w * h {
        let l = prov[i];
        if l == 0 {
            continue;
        }
        let root = find(&mut parent, l) as usize;
        if remap[root] == 0 {
            areas.push(0);
            remap[root] = areas.len() as u32;
        }
        let fin = remap[root];
        labels[i] = fin;
        areas[fin as usize - 1] += 1;
    }
    LabeledComponents {
        width: w,
        height: h,
        labels,
        areas,
    }
}

/// Removes components whose area is strictly below `min_area`.
pub fn clear_fragments(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let cc = connected_components(mask);
    let data = cc
        .labels
        .iter()
        .map(|&l| (l != 0 && cc.areas[l as usize - 1] >= min_area) as u8)
        .collect();
    BinaryMask::new(mask.width(), mask.height(), data).expect("same dimensions")
}

/// Pixelwise OR.
pub fn ensemble_union(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("ensemble_union needs at least one mask"))?;
    let mut out = first.data().to_vec();
    for m in &masks[1..] {
        check_same_dims(first, m)?;
        for (o, &v) in out.iter_mut().zip(m.data()) {
            *o |= v;
        }
    }
    BinaryMask::new(first.width(), first.height(), out)
}

/// Ids of the `top` highest scores; ties go to the lower id.
pub fn select_top_models(val_scores: &[f64], top: usize) -> Result<Vec<usize>> {
    if top > val_scores.len() {
        return Err(Error::invalid(format!(
            "cannot select {top} models out of {}",
            val_scores.len()
        )));
    }
    if let Some(i) = val_scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!(
            "validation score of model {i} is NaN"
        )));
    }
    let mut ids: Vec<usize> = (0..val_scores.len()).collect();
    ids.sort_by(|&a, &b| val_scores[b].total_cmp(&val_scores[a]).then(a.cmp(&b)));
    ids.truncate(top);
    Ok(ids)
}

/// Binarize each map, then combine and clear according to `cfg`.
///
/// With `ensemble` off only the first map is used.
pub fn postprocess(maps: &[Image], cfg: &PostprocConfig) -> Result<BinaryMask> {
    if maps.is_empty() {
        return Err(Error::invalid(
            "postprocess needs at least one probability map",
        ));
    }
    let used = if cfg.ensemble { maps } else { &maps[..1] };
    let masks = used
        .iter()
        .map(|m| binarize(m, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    if cfg.clear_before_union {
        let cleared: Vec<BinaryMask> = masks
            .iter()
            .map(|m| clear_fragments(m, cfg.min_area))
            .collect();
        ensemble_union(&cleared)
    } else {
        Ok(clear_fragments(&ensemble_union(&masks)?, cfg.min_area))
    }
}
