//! Command-line orchestration of the segmentation pipeline: one JSON config,
//! file-based stages and a run manifest per invocation.

pub mod config;
pub mod dataset;
pub mod manifest;
pub mod stages;

pub use config::{stage_seed, PipelineConfig, Preset, Stage};
pub use dataset::{Dataset, Item, Split};
pub use manifest::{sha256_hex, tree_digest, RunManifest, TreeDigest};
pub use stages::{
    augment, evaluate, export_masks, par_map, pipeline, postprocess, predict, preprocess, quantify,
    synth, train, Ctx, EvalSummary, MorphFile, PipelineSummary, Predictions, TrainSummary,
};

/// Process exit status for a failed command: 2 for filesystem errors, 1 for
/// everything else.
pub fn exit_code(err: &maseg_core::Error) -> u8 {
    if err.is_io() {
        2
    } else {
        1
    }
}
