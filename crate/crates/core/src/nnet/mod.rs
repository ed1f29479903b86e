//! Small UNet with hand-written reverse-mode gradients, BCE + Dice loss,
//! Adam, reduce-on-plateau scheduling, k-fold training and inference.

mod checkpoint;
mod graph;
mod kfold;
mod loss;
mod optim;
mod tensor;
mod train;
mod unet;

pub use checkpoint::{BestRecord, Checkpoint, CHECKPOINT_VERSION};
pub use kfold::kfold_split;
pub use loss::{bce_dice, hausdorff_surrogate, LossParts, BCE_EPS, DICE_SMOOTH};
pub use optim::{adam_step, AdamState, Plateau, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::{Scalar, Tensor};
pub use train::{
    epoch_log_csv, predict, train, EpochLog, FoldResult, FoldTrainer, TrainConfig, TrainSample,
};
pub use unet::{UNet, UNetConfig, UpMode};
