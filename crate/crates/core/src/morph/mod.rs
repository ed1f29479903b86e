//! Per-component morphology: exact distance transform, thinning skeleton and
//! the caliber indices LC, NC and BNR derived from them.

mod edt;
mod quantify;
mod skeleton;

pub use edt::{distance_transform, DistanceField};
pub(crate) use edt::{has_far, squared_distance_to};
pub use quantify::{
    quantify_component, quantify_mask, ComponentMorph, MorphReport, QuantifyConfig,
    MORPH_SCHEMA_VERSION,
};
pub use skeleton::{skeletonize, thin, Skeleton};
