//! Perfusion-map construction and the enhancement chain applied before
//! segmentation.
//!
//! The perfusion map is the per-pixel temporal standard deviation of the
//! video; moving blood shows up bright. It is then cleaned up by, in order,
//! non-local means denoising, min-max normalization, CLAHE and a gamma curve.
//! The structural channel is the frame average, inverted and box filtered.

mod clahe;
mod nlm;
mod perfusion;

pub use clahe::clahe;
pub use nlm::{nlm_denoise, nlm_denoise_bruteforce};
pub use perfusion::{enhance_aoslo, local_mean, mean_frame, perfusion_map};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{FrameStack, Image, MultiChannelImage};

/// Parameters of the enhancement chain. None of them are fixed by the
/// method description, so all are exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub nlm_patch_radius: usize,
    pub nlm_search_radius: usize,
    /// Filtering strength `h`, in intensity units.
    pub nlm_h: f32,
    /// Noise level subtracted from patch distances (`2 sigma^2`); 0 disables it.
    pub nlm_sigma: f32,
    pub clahe_tile: usize,
    /// Clip limit relative to a flat histogram; 1.0 flattens every tile.
    pub clahe_clip: f32,
    pub gamma: f32,
    pub localmean_radius: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            nlm_patch_radius: 3,
            nlm_search_radius: 7,
            nlm_h: 0.1,
            nlm_sigma: 0.0,
            clahe_tile: 64,
            clahe_clip: 2.0,
            gamma: 1.5,
            localmean_radius: 2,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nlm_patch_radius < 1 || self.nlm_search_radius < 1 || self.localmean_radius < 1 {
            return Err(Error::invalid("preproc: all radii must be >= 1"));
        }
        if self.clahe_tile < 1 {
            return Err(Error::invalid("preproc.clahe_tile must be >= 1"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!(
                "preproc.gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.clahe_clip >= 1.0) {
            return Err(Error::invalid(format!(
                "preproc.clahe_clip must be >= 1, got {}",
                self.clahe_clip
            )));
        }
        if !(self.nlm_h > 0.0) || !(self.nlm_sigma >= 0.0) {
            return Err(Error::invalid(
                "preproc.nlm_h must be > 0 and nlm_sigma >= 0",
            ));
        }
        Ok(())
    }
}

/// Min-max rescale to `[0, 1]`. A constant image maps to all zeros.
pub fn normalize(img: &Image) -> Result<Image> {
    img.require_finite("normalize")?;
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let data = if hi > lo {
        let span = hi - lo;
        img.data()
            .iter()
            .map(|&v| (((v as f64 - lo) / span) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.data().len()]
    };
    Image::new_normalized(img.width(), img.height(), data)
}

/// `v -> v^gamma` on a normalized image.
pub fn gamma_correct(img: &Image, gamma: f32) -> Result<Image> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    img.require_normalized("gamma_correct")?;
    let data = img.data().iter().map(|&v| v.powf(gamma)).collect();
    Image::new_normalized(img.width(), img.height(), data)
}

/// perfusion map -> NLM -> normalize -> CLAHE -> gamma.
pub fn preprocess_perfusion(stack: &FrameStack, cfg: &PreprocConfig) -> Result<Image> {
    cfg.validate()?;
    let perf = perfusion_map(stack)?;
    let denoised = nlm_denoise(&perf, cfg)?;
    let norm = normalize(&denoised)?;
    let eq = clahe(&norm, cfg)?;
    gamma_correct(&eq, cfg.gamma)
}

/// Stacks the perfusion map (channel 0) and the enhanced image (channel 1).
pub fn two_channel(perf: &Image, enh: &Image) -> Result<MultiChannelImage> {
    if perf.width() != enh.width() || perf.height() != enh.height() {
        return Err(Error::DimensionMismatch(format!(
            "perfusion map is {}x{}, enhanced image is {}x{}",
            perf.width(),
            perf.height(),
            enh.width(),
            enh.height()
        )));
    }
    perf.require_normalized("two_channel (perfusion)")?;
    enh.require_normalized("two_channel (enhanced)")?;
    MultiChannelImage::from_planes(&[perf, enh])
}

/// Full model input for one video: both channels.
pub fn preprocess_stack(stack: &FrameStack, cfg: &PreprocConfig) -> Result<MultiChannelImage> {
    let perf = preprocess_perfusion(stack, cfg)?;
    let enh = enhance_aoslo(stack, cfg)?;
    two_channel(&perf, &enh)
}
