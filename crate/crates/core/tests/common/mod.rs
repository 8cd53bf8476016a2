#![allow(dead_code)]

use lsh_core::config::{Criterion, RunConfig};
use lsh_core::lyapunov::LyapunovSpectrum;
use lsh_core::search::{CandidateConfig, CandidateEvaluator, Finished};
use lsh_core::seed::rng_for;
use lsh_core::training::EpochMetrics;
use lsh_core::{Error, Result};
use rand::Rng;
use std::path::{Path, PathBuf};

pub fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

/// Writes the first `bytes` of the bundled corpus into `dir`.
pub fn corpus_slice(dir: &Path, bytes: usize) -> PathBuf {
    let text = std::fs::read_to_string(corpus_path()).unwrap();
    let mut end = bytes.min(text.len());
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    let p = dir.join("corpus.txt");
    std::fs::write(&p, &text[..end]).unwrap();
    p
}

/// A run small enough to finish in seconds.
pub fn toy_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.corpus.path = corpus_slice(dir, 60_000);
    c.model.embed = 16;
    c.model.hidden = 16;
    c.model.layers = 1;
    c.train.batch_size = 8;
    c.train.bptt = 20;
    c.train.eval_batch_size = 4;
    c.train.batches_per_epoch = Some(10);
    c.train.eval_blocks = Some(5);
    c.train.dense_epochs = 3;
    c.ls.k = 1;
    c.ls.t = 40;
    c.ls.warmup = 5;
    c.search.budget_tier = None;
    c.search.pool_size = Some(4);
    c.search.epochs_per_event = 1;
    c.search.selection_epochs = 2;
    c.search.final_k = 2;
    c.search.extensive_epochs = 3;
    c.search.criterion = Criterion::LsDistance;
    c.reference_checkpoint = Some(dir.join("reference.ckpt"));
    c.validate().unwrap();
    c
}

/// Cheap stand-in for a language model: each candidate has a hidden quality
/// drawn from its seed, and its loss and spectrum drift toward it.
pub struct FakeEvaluator {
    pub dim: usize,
    /// Candidates that diverge on their second epoch.
    pub fail_ids: Vec<usize>,
}

pub struct FakeHandle {
    id: usize,
    seed: u64,
    quality: f64,
    epochs: usize,
    last_loss: f64,
}

impl FakeEvaluator {
    pub fn new(dim: usize) -> Self {
        Self { dim, fail_ids: Vec::new() }
    }
}

impl CandidateEvaluator for FakeEvaluator {
    type Handle = FakeHandle;

    fn create(&self, c: &CandidateConfig) -> Result<FakeHandle> {
        let quality = 1.0 + rng_for(c.seed, "quality", 0).random::<f64>() + c.choice.death_rate;
        Ok(FakeHandle {
            id: c.id,
            seed: c.seed,
            quality,
            epochs: 0,
            last_loss: f64::NAN,
        })
    }

    fn train_epoch(&self, h: &mut FakeHandle) -> Result<EpochMetrics> {
        if self.fail_ids.contains(&h.id) && h.epochs >= 1 {
            return Err(Error::Diverged { batch: 3 });
        }
        h.epochs += 1;
        let noise = rng_for(h.seed, "loss", h.epochs as u64).random::<f64>() * 0.01;
        let val_loss = h.quality + 1.0 / h.epochs as f64 + noise;
        h.last_loss = val_loss;
        Ok(EpochMetrics {
            epoch: h.epochs,
            train_loss: val_loss + 0.1,
            val_loss,
            val_ppl: val_loss.exp(),
        })
    }

    fn spectrum(&self, h: &FakeHandle) -> Result<LyapunovSpectrum> {
        let mut rng = rng_for(h.seed, "spectrum", h.epochs as u64);
        let mut exponents: Vec<f64> = (0..self.dim)
            .map(|i| -(i as f64) * h.quality * 0.3 + 0.05 * rng.random::<f64>())
            .collect();
        exponents.sort_by(|a, b| b.total_cmp(a));
        Ok(LyapunovSpectrum {
            exponents,
            k: 1,
            t: 10,
            warmup: 0,
            clamp_events: 0,
        })
    }

    fn finish(&self, h: &mut FakeHandle, max_epochs: usize) -> Result<Finished> {
        let mut history = Vec::new();
        while h.epochs < max_epochs {
            history.push(self.train_epoch(h)?);
        }
        Ok(Finished {
            history,
            val_ppl: h.last_loss.exp(),
            test_ppl: None,
            model: None,
        })
    }
}

pub fn fake_reference(dim: usize) -> LyapunovSpectrum {
    LyapunovSpectrum {
        exponents: (0..dim).map(|i| -(i as f64) * 0.4).collect(),
        k: 1,
        t: 10,
        warmup: 0,
        clamp_events: 0,
    }
}
