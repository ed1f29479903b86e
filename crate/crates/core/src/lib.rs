//! Microaneurysm segmentation pipeline for AOSLO video: perfusion maps and
//! enhanced structural images, paired augmentation, a small UNet trained with
//! BCE + Dice loss, binarization/clearing/ensembling, overlap metrics and
//! skeleton-based morphology (LC, NC, BNR).

pub mod augment;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod morph;
pub mod nnet;
pub mod postproc;
pub mod preproc;
pub mod synth;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
