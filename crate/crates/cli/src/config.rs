use std::fs;
use std::path::{Path, PathBuf};

use maseg_core::augment::AugmentConfig;
use maseg_core::imagecore::RngStream;
use maseg_core::morph::QuantifyConfig;
use maseg_core::nnet::{TrainConfig, UNetConfig};
use maseg_core::postproc::PostprocConfig;
use maseg_core::preproc::PreprocConfig;
use maseg_core::synth::ClassMix;
use maseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Stream ids under the top-level seed; each stage seeds its own generators
/// from the first draw of its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Augment = 2,
    Train = 3,
    Split = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Synth, Stage::Augment, Stage::Train, Stage::Split];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Split => "split",
        }
    }
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    RngStream::new(seed, stage as u64).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub mix: ClassMix,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            count: 50,
            mix: ClassMix::default(),
        }
    }
}

/// Held-out test set: fold `test_fold` of a `test_folds`-way split of the
/// generated phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_folds: usize,
    pub test_fold: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            test_folds: 5,
            test_fold: 0,
        }
    }
}

/// Training settings. The seed is not configurable here: it is derived from
/// the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(alias = "plateau_patience")]
    pub patience: usize,
    #[serde(alias = "plateau_factor")]
    pub factor: f64,
    pub kfolds: usize,
    pub ensemble_top: usize,
    pub min_lr: f64,
    pub hausdorff_weight: f64,
    pub unet: UNetConfig,
}

impl TrainSection {
    fn from_parts(t: &TrainConfig, unet: UNetConfig) -> Self {
        TrainSection {
            lr: t.lr,
            weight_decay: t.weight_decay,
            alpha: t.alpha,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.plateau_patience,
            factor: t.plateau_factor,
            kfolds: t.kfolds,
            ensemble_top: t.ensemble_top,
            min_lr: t.min_lr,
            hausdorff_weight: t.hausdorff_weight,
            unet,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            plateau_patience: self.patience,
            plateau_factor: self.factor,
            kfolds: self.kfolds,
            ensemble_top: self.ensemble_top,
            seed,
            min_lr: self.min_lr,
            hausdorff_weight: self.hausdorff_weight,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection::from_parts(&TrainConfig::desk(), UNetConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Output root of `pipeline` when no `--out` is given.
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out: PathBuf::from("maseg-run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub preproc: PreprocConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub postproc: PostprocConfig,
    pub quantify: QuantifyConfig,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            preproc: PreprocConfig::default(),
            augment: AugmentConfig {
                per_image_count: 4,
                ..AugmentConfig::default()
            },
            train: TrainSection::default(),
            postproc: PostprocConfig::default(),
            quantify: QuantifyConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Sized for a laptop CPU: 3 folds, 12 epochs, 4 augmentations per image.
    Desk,
    /// Published training schedule: 10 folds, batch 16, up to 200 epochs.
    Paper,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => PipelineConfig::default(),
            Preset::Paper => PipelineConfig {
                augment: AugmentConfig::default(),
                train: TrainSection::from_parts(&TrainConfig::default(), UNetConfig::default()),
                ..PipelineConfig::default()
            },
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth.count == 0 {
            return Err(Error::invalid("synth.count must be >= 1"));
        }
        self.synth.mix.validate()?;
        if self.split.test_folds < 2 || self.split.test_fold >= self.split.test_folds {
            return Err(Error::invalid(format!(
                "split: need test_folds >= 2 and test_fold < test_folds, got {} and {}",
                self.split.test_folds, self.split.test_fold
            )));
        }
        if self.split.test_folds > self.synth.count {
            return Err(Error::invalid(format!(
                "split.test_folds {} exceeds synth.count {}",
                self.split.test_folds, self.synth.count
            )));
        }
        self.preproc.validate()?;
        self.augment.validate()?;
        self.train.train_config(0).validate()?;
        self.train.unet.validate()?;
        if !(self.postproc.threshold.is_finite() && (0.0..=1.0).contains(&self.postproc.threshold))
        {
            return Err(Error::invalid(format!(
                "postproc.threshold must be in [0, 1], got {}",
                self.postproc.threshold
            )));
        }
        self.quantify.validate()
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        stage_seed(self.seed, stage)
    }
}
