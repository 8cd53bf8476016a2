use super::model::SparseModel;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// True once the latest validation loss fails to beat the best loss seen
/// before the last `nonmono` epochs.
pub fn ntasgd_trigger(history: &[f64], nonmono: usize) -> bool {
    if history.len() <= nonmono {
        return false;
    }
    let last = history[history.len() - 1];
    let best_before = history[..history.len() - nonmono]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    last >= best_before
}

/// Plain SGD with global-norm clipping and a non-monotonically triggered
/// switch to iterate averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub clip: f64,
    pub nonmono: usize,
    pub averaging: bool,
    /// Running mean of the parameters since averaging started, per tensor.
    pub average: Vec<Vec<f64>>,
    pub averaged_steps: u64,
    pub val_history: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, clip: f64, nonmono: usize) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(clip > 0.0) {
            return Err(Error::InvalidArgument(format!("clip threshold must be > 0, got {clip}")));
        }
        Ok(Self {
            lr,
            clip,
            nonmono,
            averaging: false,
            average: Vec::new(),
            averaged_steps: 0,
            val_history: Vec::new(),
        })
    }

    /// Records an epoch's validation loss; starts averaging when the trigger
    /// fires. Returns whether averaging is active afterwards.
    pub fn record_validation(&mut self, model: &SparseModel, val_loss: f64) -> bool {
        self.val_history.push(val_loss);
        if !self.averaging && ntasgd_trigger(&self.val_history, self.nonmono) {
            log::debug!("averaging starts after {} epochs", self.val_history.len());
            self.averaging = true;
            self.average = model.tensors().iter().map(|t| t.to_vec()).collect();
            self.averaged_steps = 1;
        }
        self.averaging
    }

    /// Clips `grads` in place to global norm `clip` and returns the norm
    /// before clipping.
    pub fn clip_gradients(&self, grads: &mut [Vec<f64>]) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip {
            let scale = self.clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
        }
        norm
    }

    /// One SGD update. Gradients of masked weights are discarded and the
    /// masks are re-applied afterwards.
    pub fn step(&mut self, model: &mut SparseModel, grads: &mut [Vec<f64>]) {
        for (&ti, mask) in model.prunable_tensor_indices().iter().zip(&model.masks.masks) {
            mask.apply(&mut grads[ti]);
        }
        self.clip_gradients(grads);
        let lr = self.lr;
        for (t, g) in model.tensors_mut().into_iter().zip(grads.iter()) {
            t.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
        }
        model.apply_masks();
        if self.averaging {
            self.averaged_steps += 1;
            let k = self.averaged_steps as f64;
            for (avg, t) in self.average.iter_mut().zip(model.tensors()) {
                avg.iter_mut().zip(t).for_each(|(a, w)| *a += (w - *a) / k);
            }
        }
    }

    /// The model to evaluate: the averaged parameters (under the current
    /// masks) when averaging is active, the model itself otherwise.
    pub fn eval_model(&self, model: &SparseModel) -> SparseModel {
        let mut out = model.clone();
        if self.averaging {
            for (t, avg) in out.tensors_mut().into_iter().zip(&self.average) {
                t.copy_from_slice(avg);
            }
            out.apply_masks();
        }
        out
    }
}
