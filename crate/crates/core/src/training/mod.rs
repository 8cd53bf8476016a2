//! Language-model training: corpus ingestion, contiguous batching, truncated
//! BPTT with clipped SGD, non-monotone averaging, and perplexity.

mod backprop;
mod batch;
mod corpus;
mod model;
mod optim;

pub use backprop::{block_loss, block_loss_and_grads, BatchState};
pub use batch::{make_batches, BatchSet};
pub use corpus::{load_corpus, Corpus, Splits, Tokenization};
pub use model::{ArchKind, CellParams, CycleStats, ModelSpec, SparseModel};
pub use optim::{ntasgd_trigger, OptimizerState};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::sparsity::{cosine_decay, DeathMode, RedistMode};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// A run of consecutive blocks, wrapping around the end of the set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWindow {
    pub start: usize,
    pub count: usize,
}

impl BlockWindow {
    pub fn all(batches: &BatchSet) -> Self {
        Self {
            start: 0,
            count: batches.num_blocks(),
        }
    }

    /// At most `limit` blocks from `start` (all blocks when `limit` is `None`).
    pub fn capped(batches: &BatchSet, start: usize, limit: Option<usize>) -> Self {
        let n = batches.num_blocks();
        Self {
            start: start % n,
            count: limit.map_or(n, |l| l.min(n)),
        }
    }

    fn blocks(self, total: usize) -> impl Iterator<Item = usize> {
        (0..self.count).map(move |k| (self.start + k) % total)
    }
}

/// One pass of truncated BPTT over `window`; returns the mean per-token loss.
///
/// The recurrent state is carried from block to block and reset to zero at
/// the start and wherever the window wraps around.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut SparseModel,
    batches: &BatchSet,
    opt: &mut OptimizerState,
    window: BlockWindow,
    dropout_rng: &mut R,
) -> Result<f64> {
    let b = batches.batch_size();
    let mut state = BatchState::zeros(model, b);
    let mut total = 0.0;
    let mut prev: Option<usize> = None;
    for j in window.blocks(batches.num_blocks()) {
        if prev.is_some_and(|p| p + 1 != j) {
            state = BatchState::zeros(model, b);
        }
        prev = Some(j);
        let (x, y) = batches.block(j);
        let (loss, mut grads) = block_loss_and_grads(model, &mut state, x, y, b, Some(&mut *dropout_rng))?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { batch: j });
        }
        opt.step(model, &mut grads);
        total += loss;
    }
    Ok(total / window.count.max(1) as f64)
}

/// Mean per-token cross-entropy over `window`, with no parameter change.
pub fn evaluate_loss(model: &SparseModel, batches: &BatchSet, window: BlockWindow) -> Result<f64> {
    let b = batches.batch_size();
    let mut state = BatchState::zeros(model, b);
    let mut total = 0.0;
    let mut prev: Option<usize> = None;
    for j in window.blocks(batches.num_blocks()) {
        if prev.is_some_and(|p| p + 1 != j) {
            state = BatchState::zeros(model, b);
        }
        prev = Some(j);
        let (x, y) = batches.block(j);
        let loss = block_loss(model, &mut state, x, y, b)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { batch: j });
        }
        total += loss;
    }
    Ok(total / window.count.max(1) as f64)
}

/// `exp` of the mean per-token cross-entropy over every block. Pass
/// [`OptimizerState::eval_model`] to score the averaged parameters.
pub fn evaluate_perplexity(model: &SparseModel, batches: &BatchSet) -> Result<f64> {
    Ok(evaluate_loss(model, batches, BlockWindow::all(batches))?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub clip: f64,
    pub nonmono: usize,
    /// Training blocks per epoch; consecutive epochs continue where the
    /// previous one stopped. `None` runs the whole training set.
    pub batches_per_epoch: Option<usize>,
    /// Validation blocks scored per epoch (from the start of the set).
    pub eval_blocks: Option<usize>,
}

/// Prune-regrow settings for a sparse candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DstSchedule {
    pub death_mode: DeathMode,
    pub redist_mode: RedistMode,
    pub death_rate: f64,
    /// Horizon of the cosine death-rate decay.
    pub total_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
}

/// Training loop state of one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SparseModel,
    pub opt: OptimizerState,
    pub settings: TrainSettings,
    pub dst: Option<DstSchedule>,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub redistribution_fallbacks: usize,
    seed: u64,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: SparseModel, settings: TrainSettings, dst: Option<DstSchedule>, seed: u64) -> Result<Self> {
        let opt = OptimizerState::new(settings.lr, settings.clip, settings.nonmono)?;
        Ok(Self {
            model,
            opt,
            settings,
            dst,
            epoch: 0,
            history: Vec::new(),
            redistribution_fallbacks: 0,
            seed,
            cursor: 0,
        })
    }

    /// Train, prune-regrow (sparse candidates only), then validate.
    pub fn run_epoch(&mut self, train: &BatchSet, valid: &BatchSet) -> Result<EpochMetrics> {
        let window = BlockWindow::capped(train, self.cursor, self.settings.batches_per_epoch);
        let mut rng = rng_for(self.seed, "dropout", self.epoch as u64);
        let train_loss = train_epoch(&mut self.model, train, &mut self.opt, window, &mut rng)?;
        self.cursor = (window.start + window.count) % train.num_blocks();

        if let Some(dst) = &self.dst {
            let rate = cosine_decay(dst.death_rate, self.epoch + 1, dst.total_epochs);
            if rate > 0.0 {
                let seed = derive_seed(self.seed, "grow", self.epoch as u64);
                let stats = self.model.prune_regrow(rate, dst.death_mode, dst.redist_mode, seed)?;
                if stats.fell_back {
                    self.redistribution_fallbacks += 1;
                }
            }
        }

        let eval = self.eval_model();
        let val_loss = evaluate_loss(&eval, valid, BlockWindow::capped(valid, 0, self.settings.eval_blocks))?;
        self.opt.record_validation(&self.model, val_loss);
        self.epoch += 1;
        let m = EpochMetrics {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_ppl: val_loss.exp(),
        };
        self.history.push(m);
        Ok(m)
    }

    pub fn eval_model(&self) -> SparseModel {
        self.opt.eval_model(&self.model)
    }

    /// Runs epochs until `max_epochs` are done or validation loss has not
    /// improved for `patience` epochs. Returns the best validation epoch's
    /// evaluation model and metrics.
    pub fn train_until_converged(
        &mut self,
        train: &BatchSet,
        valid: &BatchSet,
        max_epochs: usize,
        patience: usize,
        mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
    ) -> Result<(SparseModel, EpochMetrics)> {
        let mut best: Option<(SparseModel, EpochMetrics)> = None;
        let mut since_best = 0;
        while self.epoch < max_epochs {
            let m = self.run_epoch(train, valid)?;
            on_epoch(&m)?;
            if best.as_ref().is_none_or(|(_, b)| m.val_loss < b.val_loss) {
                best = Some((self.eval_model(), m));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience.max(1) {
                    break;
                }
            }
        }
        match best {
            Some(b) => Ok(b),
            None => {
                // Already at the cap: score the current model.
                let eval = self.eval_model();
                let val_loss = evaluate_loss(&eval, valid, BlockWindow::capped(valid, 0, self.settings.eval_blocks))?;
                Ok((
                    eval,
                    EpochMetrics {
                        epoch: self.epoch,
                        train_loss: f64::NAN,
                        val_loss,
                        val_ppl: val_loss.exp(),
                    },
                ))
            }
        }
    }
}

/// Appends one row to a metrics CSV, writing the header for a new file.
pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,train_loss,val_loss,val_ppl\n");
    }
    text.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.val_ppl));
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
