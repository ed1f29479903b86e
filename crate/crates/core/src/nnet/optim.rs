use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments and step counter. Moments are kept in `f32` whatever the
/// parameter type so checkpoints have a single layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<S: Scalar>(params: &[Tensor<S>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam update with weight decay added to the gradient. `names` labels
/// the parameter blocks for error messages.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter blocks, {} gradient blocks, {} moment blocks",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient shape mismatch in block {i}"
            )));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFinite(format!(
                "gradient of parameter block {name}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - ADAM_BETA1.powf(t);
    let c2 = 1.0 - ADAM_BETA2.powf(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let wf = w.as_f64();
            let gj = gj.as_f64() + weight_decay * wf;
            let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            *w = S::from_f64(wf - update);
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    /// Lowest loss seen so far; `None` before the first step.
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub delta: f64,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Plateau {
            lr,
            best: None,
            since_improvement: 0,
            patience,
            factor,
            delta: 1e-6,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss}")));
        }
        let improved = self.best.map_or(true, |b| val_loss < b - self.delta);
        if improved {
            self.best = Some(val_loss);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement > self.patience {
                self.lr *= self.factor;
                self.since_improvement = 0;
            }
        }
        Ok(self.lr)
    }
}
