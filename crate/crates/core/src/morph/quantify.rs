use serde::{Deserialize, Serialize};

use super::skeleton::analyze;
use super::{DistanceField, Skeleton};
use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;

pub const MORPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantifyConfig {
    /// Number of smallest medial radii averaged for NC.
    pub nc_count: usize,
    pub microns_per_pixel: Option<f64>,
}

impl Default for QuantifyConfig {
    fn default() -> Self {
        QuantifyConfig {
            nc_count: 10,
            microns_per_pixel: None,
        }
    }
}

impl QuantifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nc_count == 0 {
            return Err(Error::invalid("nc_count must be >= 1"));
        }
        if let Some(s) = self.microns_per_pixel {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!(
                    "microns_per_pixel must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Morphology of one connected component. `lc` and `nc` are in the report's
/// units; `area` is always in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMorph {
    pub id: u32,
    pub area: usize,
    pub lc: f64,
    pub nc: f64,
    pub bnr: f64,
    pub skeleton_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphReport {
    pub schema_version: u32,
    /// "px" or "um".
    pub units: String,
    pub microns_per_pixel: Option<f64>,
    pub nc_count: usize,
    pub components: Vec<ComponentMorph>,
    pub notes: Vec<String>,
}

impl MorphReport {
    /// Component with the largest area (lowest id on ties).
    pub fn largest(&self) -> Option<&ComponentMorph> {
        self.components
            .iter()
            .min_by(|a, b| b.area.cmp(&a.area).then(a.id.cmp(&b.id)))
    }
}

/// LC, NC and BNR (in pixels) from the distance field sampled on the
/// skeleton. Returns `None` for an empty skeleton.
pub fn quantify_component(
    field: &DistanceField,
    skel: &Skeleton,
    nc_count: usize,
) -> Option<(f64, f64, f64)> {
    if skel.is_empty() || nc_count == 0 {
        return None;
    }
    let mut d: Vec<f64> = skel.points.iter().map(|&(x, y)| field.get(x, y)).collect();
    d.sort_by(f64::total_cmp);
    let lc = 2.0 * d[d.len() - 1];
    let k = nc_count.min(d.len());
    let nc = 2.0 * d[..k].iter().sum::<f64>() / k as f64;
    Some((lc, nc, lc / nc))
}

/// One of the eight symmetries of the pixel grid: optional transpose, then
/// optional mirror in x and in y.
#[derive(Clone, Copy)]
struct GridSymmetry(u8);

impl GridSymmetry {
    fn dims(self, w: usize, h: usize) -> (usize, usize) {
        if self.0 & 4 != 0 {
            (h, w)
        } else {
            (w, h)
        }
    }

    fn map(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let (mut x, mut y) = if self.0 & 4 != 0 { (y, x) } else { (x, y) };
        let (tw, th) = self.dims(w, h);
        if self.0 & 1 != 0 {
            x = tw - 1 - x;
        }
        if self.0 & 2 != 0 {
            y = th - 1 - y;
        }
        (x, y)
    }

    fn apply(self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width(), mask.height());
        let (tw, th) = self.dims(w, h);
        let mut out = BinaryMask::empty(tw, th);
        for (x, y) in mask.foreground() {
            let (u, v) = self.map(x, y, w, h);
            out.set(u, v, true);
        }
        out
    }
}

/// Labels the mask and quantifies every component against its own distance
/// field (other components count as background).
///
/// Thinning is direction dependent, so LC and NC are averaged over the
/// skeletons of all eight grid symmetries of the mask; the reported
/// skeleton size is that of the mask as given.
pub fn quantify_mask(mask: &BinaryMask, cfg: &QuantifyConfig) -> Result<MorphReport> {
    cfg.validate()?;
    let (w, h) = (mask.width(), mask.height());
    let (cc, _, skels) = analyze(mask);
    let mut first = vec![usize::MAX; cc.count()];
    for (j, &l) in cc.labels.iter().enumerate() {
        if l > 0 && first[l as usize - 1] == usize::MAX {
            first[l as usize - 1] = j;
        }
    }
    // Per component: sums of lc and nc and the number of symmetries with a
    // nonempty skeleton.
    let mut acc = vec![(0.0, 0.0, 0usize); cc.count()];
    for t in 0..8 {
        let sym = GridSymmetry(t);
        let (tcc, tfields, tskels) = analyze(&sym.apply(mask));
        let tw = sym.dims(w, h).0;
        for (i, &j) in first.iter().enumerate() {
            let (u, v) = sym.map(j % w, j / w, w, h);
            let tl = tcc.labels[v * tw + u] as usize - 1;
            if let Some((lc, nc, _)) = quantify_component(&tfields[tl], &tskels[tl], cfg.nc_count) {
                acc[i].0 += lc;
                acc[i].1 += nc;
                acc[i].2 += 1;
            }
        }
    }
    let scale = cfg.microns_per_pixel.unwrap_or(1.0);
    let mut components = Vec::new();
    let mut notes = Vec::new();
    for (i, skel) in skels.iter().enumerate() {
        let id = i as u32 + 1;
        let (lc_sum, nc_sum, n) = acc[i];
        if n == 0 {
            log::warn!("component {id} has an empty skeleton; skipped");
            notes.push(format!("component {id}: empty skeleton, skipped"));
            continue;
        }
        if skel.len() < cfg.nc_count {
            notes.push(format!(
                "component {id}: NC averaged over all {} skeleton points",
                skel.len()
            ));
        }
        let (lc, nc) = (lc_sum / n as f64, nc_sum / n as f64);
        components.push(ComponentMorph {
            id,
            area: cc.areas[i],
            lc: lc * scale,
            nc: nc * scale,
            bnr: lc / nc,
            skeleton_points: skel.len(),
        });
    }
    Ok(MorphReport {
        schema_version: MORPH_SCHEMA_VERSION,
        units: if cfg.microns_per_pixel.is_some() {
            "um"
        } else {
            "px"
        }
        .to_string(),
        microns_per_pixel: cfg.microns_per_pixel,
        nc_count: cfg.nc_count,
        components,
        notes,
    })
}
