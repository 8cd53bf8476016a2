//! End-to-end runs on a text corpus: dense reference training, spectrum
//! measurement and the full search.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Criterion, LsConfig, RunConfig};
use crate::error::{Error, Result};
use crate::lyapunov::{compute_ls, ls_windows, write_spectrum_csv, LyapunovSpectrum, ModelDynamics};
use crate::rundir::{DirLock, RunDir};
use crate::search::{lsh_run, CandidateConfig, CandidateEvaluator, Finished, SearchOutcome};
use crate::seed::derive_seed;
use crate::training::{
    append_metrics, evaluate_perplexity, load_corpus, make_batches, BatchSet, Corpus, DstSchedule, EpochMetrics,
    SparseModel, Trainer,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Batched splits of a corpus plus the fixed token windows used for every
/// spectrum in a run.
pub struct Dataset {
    pub vocab: usize,
    pub train: BatchSet,
    pub valid: BatchSet,
    pub test: BatchSet,
    pub ls_batch: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<Self> {
        let splits = corpus.split();
        let t = &cfg.train;
        Ok(Self {
            vocab: corpus.vocab_size(),
            train: make_batches(&splits.train, t.batch_size, t.bptt)?,
            valid: make_batches(&splits.valid, t.eval_batch_size, t.bptt)?,
            test: make_batches(&splits.test, t.eval_batch_size, t.bptt)?,
            ls_batch: ls_windows(&splits.valid, cfg.ls.k, cfg.ls.t, 0)?,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        if !cfg.corpus.path.is_file() {
            return Err(Error::config(
                "corpus.path",
                format!("{} does not exist or is not a file", cfg.corpus.path.display()),
            ));
        }
        Self::from_corpus(&load_corpus(&cfg.corpus.path, cfg.corpus.tokenization)?, cfg)
    }
}

pub fn model_spectrum(model: &SparseModel, ls_batch: &[Vec<u32>], ls: &LsConfig) -> Result<LyapunovSpectrum> {
    compute_ls(&ModelDynamics::new(model, ls.state_space), ls_batch, ls.warmup)
}

/// Trains sparse candidates on a [`Dataset`]. The death-rate decay runs over
/// the extensive-training horizon.
pub struct LmEvaluator<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Dataset,
}

impl CandidateEvaluator for LmEvaluator<'_> {
    type Handle = Trainer;

    fn create(&self, c: &CandidateConfig) -> Result<Trainer> {
        let model = SparseModel::new(self.cfg.model_spec(self.data.vocab), c.choice.init_mode, self.cfg.sparsity, c.seed)?;
        let dst = DstSchedule {
            death_mode: c.choice.death_mode,
            redist_mode: c.choice.redist_mode,
            death_rate: c.choice.death_rate,
            total_epochs: self.cfg.search.extensive_epochs,
        };
        Trainer::new(model, self.cfg.train_settings(), Some(dst), c.seed)
    }

    fn train_epoch(&self, h: &mut Trainer) -> Result<EpochMetrics> {
        h.run_epoch(&self.data.train, &self.data.valid)
    }

    fn spectrum(&self, h: &Trainer) -> Result<LyapunovSpectrum> {
        model_spectrum(&h.eval_model(), &self.data.ls_batch, &self.cfg.ls)
    }

    fn finish(&self, h: &mut Trainer, max_epochs: usize) -> Result<Finished> {
        let before = h.history.len();
        let (best, _) = h.train_until_converged(&self.data.train, &self.data.valid, max_epochs, self.cfg.train.nonmono, |_| Ok(()))?;
        Ok(Finished {
            history: h.history[before..].to_vec(),
            val_ppl: evaluate_perplexity(&best, &self.data.valid)?,
            test_ppl: Some(evaluate_perplexity(&best, &self.data.test)?),
            model: Some(best),
        })
    }
}

/// Dense model and its spectrum.
pub struct Reference {
    pub model: SparseModel,
    pub spectrum: LyapunovSpectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_ppl: f64,
    pub test_ppl: f64,
}

/// Trains the dense model to convergence (capped at `train.dense_epochs`).
/// Each epoch's metrics go to `metrics_path` when given.
pub fn train_dense(cfg: &RunConfig, data: &Dataset, metrics_path: Option<&Path>) -> Result<(SparseModel, DenseSummary)> {
    let seed = derive_seed(cfg.seed, "dense", 0);
    let model = SparseModel::dense(cfg.model_spec(data.vocab), seed)?;
    let mut trainer = Trainer::new(model, cfg.train_settings(), None, seed)?;
    let (best, m) = trainer.train_until_converged(&data.train, &data.valid, cfg.train.dense_epochs, cfg.train.nonmono, |m| {
        log::info!("dense epoch {}: train {:.4} val ppl {:.3}", m.epoch, m.train_loss, m.val_ppl);
        match metrics_path {
            Some(p) => append_metrics(p, m),
            None => Ok(()),
        }
    })?;
    let summary = DenseSummary {
        epochs: trainer.epoch,
        best_epoch: m.epoch,
        val_ppl: evaluate_perplexity(&best, &data.valid)?,
        test_ppl: evaluate_perplexity(&best, &data.test)?,
    };
    Ok((best, summary))
}

/// Loads `reference_checkpoint` when it exists, otherwise trains a dense
/// model and saves it there.
pub fn obtain_reference(cfg: &RunConfig, data: &Dataset) -> Result<Reference> {
    let expected = cfg.model_spec(data.vocab);
    let model = match &cfg.reference_checkpoint {
        Some(p) if p.exists() => {
            let m = load_checkpoint(p)?;
            if m.spec != expected {
                return Err(Error::config(
                    "reference_checkpoint",
                    format!("{} holds a model that does not match the configured architecture", p.display()),
                ));
            }
            log::info!("loaded reference from {}", p.display());
            m
        }
        path => {
            let (m, summary) = train_dense(cfg, data, None)?;
            log::info!("dense reference: val ppl {:.3} after {} epochs", summary.val_ppl, summary.epochs);
            if let Some(p) = path {
                save_checkpoint(&m, p)?;
            }
            m
        }
    };
    let spectrum = model_spectrum(&model, &data.ls_batch, &cfg.ls)?;
    Ok(Reference { model, spectrum })
}

/// Dense training run: `dense.ckpt`, `metrics.csv`, `spectrum.csv` and
/// `summary.json` in `out_dir`.
pub fn run_dense(cfg: &RunConfig, out_dir: &Path) -> Result<DenseSummary> {
    let _lock = DirLock::acquire(out_dir)?;
    crate::rundir::write_json(&out_dir.join("run.json"), cfg)?;
    let data = Dataset::load(cfg)?;
    let metrics = out_dir.join("metrics.csv");
    if metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(metrics.display().to_string(), e))?;
    }
    let (model, summary) = train_dense(cfg, &data, Some(&metrics))?;
    save_checkpoint(&model, &out_dir.join("dense.ckpt"))?;
    let spectrum = model_spectrum(&model, &data.ls_batch, &cfg.ls)?;
    write_spectrum_csv(&out_dir.join("spectrum.csv"), &spectrum.exponents)?;
    crate::rundir::write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Spectrum of a saved model on the configured corpus windows.
pub fn run_ls(cfg: &RunConfig, checkpoint: &Path, out_csv: &Path) -> Result<LyapunovSpectrum> {
    let model = load_checkpoint(checkpoint)?;
    let data = Dataset::load(cfg)?;
    if model.spec.vocab != data.vocab {
        return Err(Error::InvalidData(format!(
            "{} has vocabulary {} but the corpus has {}",
            checkpoint.display(),
            model.spec.vocab,
            data.vocab
        )));
    }
    let spectrum = model_spectrum(&model, &data.ls_batch, &cfg.ls)?;
    write_spectrum_csv(out_csv, &spectrum.exponents)?;
    Ok(spectrum)
}

/// Full search into `out_dir`. The dense reference is only needed, and so
/// only built, for the spectrum criterion.
pub fn run_search(cfg: &RunConfig, out_dir: &Path) -> Result<SearchOutcome> {
    let _lock = DirLock::acquire(out_dir)?;
    let mut rd = RunDir::create(out_dir)?;
    rd.write_json("run.json", cfg)?;
    let data = Dataset::load(cfg)?;
    let reference = match cfg.search.criterion {
        Criterion::LsDistance => Some(obtain_reference(cfg, &data)?),
        Criterion::ValLoss => None,
    };
    let evaluator = LmEvaluator { cfg, data: &data };
    lsh_run(&cfg.search, cfg.seed, &evaluator, reference.as_ref().map(|r| &r.spectrum), Some(&mut rd))
}
