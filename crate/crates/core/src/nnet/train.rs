use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{BestRecord, Checkpoint};
use super::graph::Graph;
use super::kfold::kfold_split;
use super::loss::{objective, LossParts};
use super::optim::{adam_step, AdamState, Plateau};
use super::tensor::Tensor;
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, Image, MultiChannelImage, RngStream};
use crate::metrics::dice;
use crate::postproc::binarize;

/// Stream ids under the training seed.
const INIT_STREAM: u64 = 1000;
const ORDER_STREAM: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(rename = "patience", alias = "plateau_patience")]
    pub plateau_patience: usize,
    #[serde(rename = "factor", alias = "plateau_factor")]
    pub plateau_factor: f64,
    pub kfolds: usize,
    pub ensemble_top: usize,
    pub seed: u64,
    /// Training stops once the scheduled rate falls below this.
    pub min_lr: f64,
    /// Weight of the distance-weighted boundary term; 0 disables it.
    pub hausdorff_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-8,
            alpha: 0.2,
            batch_size: 16,
            max_epochs: 200,
            plateau_patience: 5,
            plateau_factor: 0.1,
            kfolds: 10,
            ensemble_top: 3,
            seed: 0,
            min_lr: 1e-7,
            hausdorff_weight: 0.0,
        }
    }
}

impl TrainConfig {
    /// Laptop-sized preset: small batches, fewer folds and epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            max_epochs: 12,
            kfolds: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("alpha", self.alpha),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.hausdorff_weight.is_finite() && self.hausdorff_weight >= 0.0) {
            return Err(Error::invalid("hausdorff_weight must be non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!(
                "plateau_factor must be in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::invalid(
                "batch_size, max_epochs and plateau_patience must be positive",
            ));
        }
        if self.kfolds < 2 {
            return Err(Error::invalid(format!(
                "kfolds must be at least 2, got {}",
                self.kfolds
            )));
        }
        if self.ensemble_top == 0 || self.ensemble_top > self.kfolds {
            return Err(Error::invalid(format!(
                "ensemble_top must be in 1..={}, got {}",
                self.kfolds, self.ensemble_top
            )));
        }
        Ok(())
    }
}

/// One training pair. Samples sharing a `group` derive from the same source
/// image and always land in the same fold.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub group: usize,
    pub augmented: bool,
    pub image: MultiChannelImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

/// CSV rendering of an epoch log with a header row.
pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss,val_dice\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch, e.lr, e.train_loss, e.val_loss, e.val_dice
        );
    }
    s
}

fn stack_batch(samples: &[TrainSample], idx: &[usize]) -> Result<(Tensor<f32>, Vec<BinaryMask>)> {
    let first = &samples[idx[0]].image;
    let shape = [idx.len(), first.channels(), first.height(), first.width()];
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(samples[i].image.data());
        masks.push(samples[i].mask.clone());
    }
    Ok((Tensor::new(shape, data)?, masks))
}

/// Training state of a single cross-validation fold.
pub struct FoldTrainer<'a> {
    samples: &'a [TrainSample],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    net: UNet<f32>,
    names: Vec<String>,
    adam: AdamState,
    sched: Plateau,
    order: RngStream,
    cfg: TrainConfig,
    fold: usize,
    epoch: usize,
    log: Vec<EpochLog>,
    best: Option<(BestRecord, Vec<Tensor<f32>>)>,
}

/// Splits sample indices into (train, validation) for `fold`: validation
/// holds the non-augmented samples of the fold's groups, training every
/// sample of the other groups.
fn fold_indices(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut groups: Vec<usize> = samples.iter().map(|s| s.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let folds = kfold_split(groups.len(), cfg.kfolds, cfg.seed)?;
    let held = folds.get(fold).ok_or_else(|| {
        Error::invalid(format!("fold {fold} out of range for {} folds", cfg.kfolds))
    })?;
    let held: Vec<usize> = held.iter().map(|&g| groups[g]).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if held.binary_search(&s.group).is_ok() {
            if !s.augmented {
                val.push(i);
            }
        } else {
            train.push(i);
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "fold {fold} has an empty training or validation set"
        )));
    }
    Ok((train, val))
}

fn check_samples(samples: &[TrainSample], unet: &UNetConfig) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let (w, h) = (first.image.width(), first.image.height());
    for (i, s) in samples.iter().enumerate() {
        if s.image.width() != w
            || s.image.height() != h
            || s.mask.width() != w
            || s.mask.height() != h
        {
            return Err(Error::DimensionMismatch(format!(
                "sample {i} is not {w}x{h}"
            )));
        }
        if s.image.channels() != unet.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "sample {i} has {} channels, network expects {}",
                s.image.channels(),
                unet.in_channels
            )));
        }
    }
    let d = unet.divisor();
    if w % d != 0 || h % d != 0 {
        return Err(Error::DimensionMismatch(format!(
            "spatial dims not divisible by {d}: {w}x{h}"
        )));
    }
    Ok(())
}

impl<'a> FoldTrainer<'a> {
    pub fn new(
        samples: &'a [TrainSample],
        unet: &UNetConfig,
        cfg: &TrainConfig,
        fold: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        unet.validate()?;
        check_samples(samples, unet)?;
        let (train_idx, val_idx) = fold_indices(samples, cfg, fold)?;
        let net = UNet::init(
            unet,
            &mut RngStream::new(cfg.seed, INIT_STREAM + fold as u64),
        )?;
        let adam = AdamState::new(&net.params);
        Ok(FoldTrainer {
            samples,
            train_idx,
            val_idx,
            names: unet.param_names(),
            adam,
            net,
            sched: Plateau::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor),
            order: RngStream::new(cfg.seed, ORDER_STREAM + fold as u64),
            cfg: cfg.clone(),
            fold,
            epoch: 0,
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues from a saved state; the best-epoch parameters are not part
    /// of a checkpoint, so the best record restarts from the current model.
    pub fn resume(samples: &'a [TrainSample], ckpt: &Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        check_samples(samples, &ckpt.unet)?;
        let (train_idx, val_idx) = fold_indices(samples, &ckpt.train, ckpt.fold)?;
        let net = ckpt.model()?;
        let best = ckpt.best.map(|b| (b, net.params.clone()));
        Ok(FoldTrainer {
            samples,
            train_idx,
            val_idx,
            names: ckpt.unet.param_names(),
            adam: ckpt.adam.clone(),
            net,
            sched: ckpt.scheduler.clone(),
            order: RngStream::from_state(ckpt.rng),
            cfg: ckpt.train.clone(),
            fold: ckpt.fold,
            epoch: ckpt.epoch,
            log: ckpt.log.clone(),
            best,
        })
    }

    /// Reinstates the best-epoch parameters saved alongside a resumed
    /// checkpoint; `best` must carry the record the trainer resumed with.
    pub fn restore_best(&mut self, best: &Checkpoint) -> Result<()> {
        let current = self.best.as_ref().map(|b| b.0);
        if best.best.is_none() || best.best != current || best.fold != self.fold {
            return Err(Error::invalid(format!(
                "best checkpoint of fold {} does not match the resumed state",
                best.fold
            )));
        }
        let net = best.model()?;
        if net.config != self.net.config {
            return Err(Error::invalid(
                "best checkpoint has a different network configuration",
            ));
        }
        self.best = Some((best.best.expect("checked above"), net.params));
        Ok(())
    }

    pub fn model(&self) -> &UNet<f32> {
        &self.net
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_idx.len()
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.sched.lr < self.cfg.min_lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            unet: self.net.config.clone(),
            train: self.cfg.clone(),
            fold: self.fold,
            epoch: self.epoch,
            params: self.net.params.clone(),
            adam: self.adam.clone(),
            scheduler: self.sched.clone(),
            rng: self.order.state(),
            log: self.log.clone(),
            best: self.best.as_ref().map(|b| b.0),
        }
    }

    /// The current checkpoint with the best-validation parameters swapped in.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = self.checkpoint();
        if let Some((_, params)) = &self.best {
            c.params = params.clone();
        }
        c
    }

    fn train_batch(&mut self, idx: &[usize]) -> Result<LossParts> {
        let (x, masks) = stack_batch(self.samples, idx)?;
        let grads = {
            let mut g = Graph::new(&self.net.params);
            let xi = g.input(x);
            let z = self.net.logits(&mut g, xi);
            let (parts, _, dz) = objective(
                g.value(z),
                &masks,
                self.cfg.alpha,
                self.cfg.hausdorff_weight,
            )?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at fold {} epoch {}",
                    self.fold,
                    self.epoch + 1
                )));
            }
            (parts, g.backward(z, dz))
        };
        adam_step(
            &mut self.net.params,
            &grads.1,
            &self.names,
            &mut self.adam,
            self.sched.lr,
            self.cfg.weight_decay,
        )?;
        Ok(grads.0)
    }

    /// Mean loss and mean hard Dice (threshold 0.5) over the validation set.
    fn validate(&self) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut dice_sum = 0.0;
        for chunk in self.val_idx.chunks(self.cfg.batch_size) {
            let (x, masks) = stack_batch(self.samples, chunk)?;
            let mut g = Graph::new(&self.net.params);
            let xi = g.input(x);
            let z = self.net.logits(&mut g, xi);
            let (parts, probs, _) = objective(
                g.value(z),
                &masks,
                self.cfg.alpha,
                self.cfg.hausdorff_weight,
            )?;
            loss += parts.total * chunk.len() as f64;
            let [_, _, h, w] = probs.shape();
            for (plane, m) in probs.data().chunks(w * h).zip(&masks) {
                let map = Image::new(w, h, plane.to_vec())?;
                dice_sum += dice(&binarize(&map, 0.5)?, m)?;
            }
        }
        let n = self.val_idx.len() as f64;
        Ok((loss / n, dice_sum / n))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.sched.lr;
        let mut order = self.train_idx.clone();
        self.order.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let parts = self.train_batch(chunk)?;
            total += parts.total * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, val_dice) = self.validate()?;
        self.sched.step(val_loss)?;
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            lr,
            train_loss,
            val_loss,
            val_dice,
        };
        log::info!(
            "fold {} epoch {}: lr {:.1e} train {:.4} val {:.4} dice {:.4}",
            self.fold,
            self.epoch,
            lr,
            train_loss,
            val_loss,
            val_dice
        );
        self.log.push(entry);
        let better = self
            .best
            .as_ref()
            .map_or(true, |(b, _)| val_dice > b.val_dice);
        if better {
            let record = BestRecord {
                epoch: self.epoch,
                val_dice,
                val_loss,
            };
            self.best = Some((record, self.net.params.clone()));
        }
        Ok(entry)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Outcome of one fold: the final state and the best-validation model.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub last: Checkpoint,
    pub best: Checkpoint,
}

impl FoldResult {
    pub fn best_val_dice(&self) -> f64 {
        self.best.best.map_or(0.0, |b| b.val_dice)
    }
}

/// Trains one model per validation fold. With `dump_dir`, a non-finite
/// loss writes the failing fold's state to `fold<k>_failed.ckpt` there
/// before the error is returned.
pub fn train(
    samples: &[TrainSample],
    unet: &UNetConfig,
    cfg: &TrainConfig,
    dump_dir: Option<&Path>,
) -> Result<Vec<FoldResult>> {
    let mut results = Vec::with_capacity(cfg.kfolds);
    for fold in 0..cfg.kfolds {
        let mut trainer = FoldTrainer::new(samples, unet, cfg, fold)?;
        if let Err(e) = trainer.run() {
            if let (Error::NonFinite(_), Some(dir)) = (&e, dump_dir) {
                trainer
                    .checkpoint()
                    .save(dir.join(format!("fold{fold}_failed.ckpt")))?;
            }
            return Err(e);
        }
        results.push(FoldResult {
            fold,
            last: trainer.checkpoint(),
            best: trainer.best_checkpoint(),
        });
    }
    Ok(results)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Foreground probability map of `image`. Inputs whose sides are not
/// multiples of the network divisor are reflect-padded on the right and
/// bottom and the result is cropped back.
pub fn predict(net: &UNet<f32>, image: &MultiChannelImage) -> Result<Image> {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    if c != net.config.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "network expects {} input channels, image has {c}",
            net.config.in_channels
        )));
    }
    let d = net.config.divisor();
    let (pw, ph) = (w.div_ceil(d) * d, h.div_ceil(d) * d);
    let mut data = Vec::with_capacity(c * pw * ph);
    for ch in 0..c {
        let plane = image.plane(ch);
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                data.push(plane[sy * w + reflect(x, w)]);
            }
        }
    }
    let out = net.forward(&Tensor::new([1, c, ph, pw], data)?)?;
    let probs = out.data();
    let mut cropped = Vec::with_capacity(w * h);
    for y in 0..h {
        cropped.extend_from_slice(&probs[y * pw..y * pw + w]);
    }
    Image::new_normalized(w, h, cropped)
}
