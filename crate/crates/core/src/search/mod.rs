//! Candidate pools, removal events and the search loop.
//!
//! A pool of sparse-training configurations is trained side by side. Every
//! `E` epochs the pool is scored, the worse half is dropped and a quarter of
//! the pre-removal size is refilled with fresh proposals. Survivors are then
//! trained to convergence and the best one by validation perplexity wins.

mod sampler;

pub use sampler::{grid_candidates, random_choice, tpe_propose, MethodChoice, Observation, SamplerSpace, TpeSettings};

use crate::config::{Criterion, SamplerKind, SearchConfig};
use crate::error::{Error, Result};
use crate::ls_space::{distance, fit_embedding, DistanceMetric, EmbeddingMethod};
use crate::lyapunov::{spectrum_stats, LyapunovSpectrum, SpectrumStats};
use crate::rundir::{EmbeddingRow, PoolAction, PoolHistoryRow, RunDir};
use crate::seed::{derive_seed, rng_for};
use crate::training::{EpochMetrics, SparseModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One member of the pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub id: usize,
    #[serde(flatten)]
    pub choice: MethodChoice,
    pub seed: u64,
}

impl CandidateConfig {
    pub fn new(run_seed: u64, id: usize, choice: MethodChoice) -> Self {
        Self {
            id,
            choice,
            seed: derive_seed(run_seed, "candidate", id as u64),
        }
    }
}

/// Candidates kept at an event with `n` members before removal.
pub fn keep_count(n: usize, final_k: usize) -> usize {
    final_k.max(n / 2).min(n)
}

/// Fresh candidates added after keeping `kept` of `n`.
pub fn generate_count(n: usize, kept: usize, final_k: usize) -> usize {
    if kept > final_k {
        n / 4
    } else {
        0
    }
}

/// Pool size at the start and after every event, assuming no failures.
pub fn pool_trajectory(n: usize, epochs_per_event: usize, selection_epochs: usize, final_k: usize) -> Vec<usize> {
    let mut sizes = vec![n];
    let mut size = n;
    let mut clock = 0;
    while clock < selection_epochs && size > final_k {
        let keep = keep_count(size, final_k);
        size = keep + generate_count(size, keep, final_k);
        sizes.push(size);
        clock += epochs_per_event.max(1);
    }
    sizes
}

/// Orders candidates by score, lowest first, ties by id. Non-finite scores
/// rank last. Every candidate needs a score.
pub fn rank_candidates(scores: &[(usize, Option<f64>)], measurement: &'static str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(scores.len());
    for &(id, s) in scores {
        let s = s.ok_or_else(|| Error::IncompleteState {
            candidate: crate::rundir::candidate_name(id),
            measurement,
        })?;
        out.push((id, if s.is_finite() { s } else { f64::INFINITY }));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Result of extensive training.
#[derive(Clone, Debug)]
pub struct Finished {
    /// Epochs run by this call.
    pub history: Vec<EpochMetrics>,
    pub val_ppl: f64,
    pub test_ppl: Option<f64>,
    pub model: Option<SparseModel>,
}

/// Trains and measures individual candidates. Handles are moved across
/// worker threads; everything else is shared.
pub trait CandidateEvaluator: Sync {
    type Handle: Send;
    fn create(&self, candidate: &CandidateConfig) -> Result<Self::Handle>;
    fn train_epoch(&self, handle: &mut Self::Handle) -> Result<EpochMetrics>;
    fn spectrum(&self, handle: &Self::Handle) -> Result<LyapunovSpectrum>;
    /// Trains until the candidate has `max_epochs` epochs or stops improving.
    fn finish(&self, handle: &mut Self::Handle, max_epochs: usize) -> Result<Finished>;
}

/// Errors that disqualify one candidate without stopping the run.
pub fn is_candidate_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Diverged { .. } | Error::Numeric(_) | Error::Linalg(_) | Error::Capacity { .. }
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Removed,
    Failed,
    Finalist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub event: usize,
    /// Epochs the candidate had completed.
    pub epoch: usize,
    pub distance: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub id: usize,
    pub config: CandidateConfig,
    pub status: CandidateStatus,
    pub created_at: usize,
    pub removed_at: Option<usize>,
    pub selection_epochs: usize,
    pub extensive_epochs: usize,
    pub measurements: Vec<Measurement>,
    pub failure: Option<String>,
    pub final_val_ppl: Option<f64>,
    pub test_ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub event: usize,
    /// Selection clock after this event's training round.
    pub clock: usize,
    pub pool_before: usize,
    pub kept: usize,
    pub removed: usize,
    pub failed: usize,
    pub generated: usize,
    pub pool_after: usize,
    /// Candidate-epochs spent on selection through this event.
    pub epochs_consumed: usize,
    /// Best capped validation perplexity measured through this event.
    pub best_val_ppl: f64,
    pub best_candidate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub dim: usize,
    pub stats: SpectrumStats,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCandidate {
    pub id: usize,
    pub config: CandidateConfig,
    pub val_ppl: f64,
    pub test_ppl: Option<f64>,
    pub epochs: usize,
}

/// Everything a run decided, without wall-clock data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub seed: u64,
    pub criterion: Criterion,
    pub sampler: SamplerKind,
    pub embedding: EmbeddingMethod,
    pub metric: DistanceMetric,
    pub uses_spectra: bool,
    pub initial_pool: usize,
    pub epochs_per_event: usize,
    pub selection_epoch_limit: usize,
    pub final_k: usize,
    pub pool_sizes: Vec<usize>,
    pub expected_pool_sizes: Vec<usize>,
    pub events: Vec<EventSummary>,
    /// Candidate-epochs actually trained during selection.
    pub selection_epochs: usize,
    /// Sum over events of pool size times epochs per event.
    pub selection_epochs_formula: usize,
    pub extensive_epochs: usize,
    pub total_epochs: usize,
    pub clamp_events: usize,
    pub reference: Option<ReferenceSummary>,
    pub candidates: Vec<CandidateSummary>,
    pub best: Option<BestCandidate>,
    pub failed: Vec<usize>,
}

impl SearchReport {
    /// Best perplexity reachable at each cumulative epoch budget: one row per
    /// event, then the final row scored on the full validation set.
    pub fn budget_table(&self) -> Vec<crate::rundir::BudgetRow> {
        let mut rows: Vec<_> = self
            .events
            .iter()
            .map(|e| crate::rundir::BudgetRow {
                stage: format!("event {}", e.event),
                epochs_consumed: e.epochs_consumed,
                best_val_ppl: e.best_val_ppl,
                best_candidate: e.best_candidate,
            })
            .collect();
        if let Some(b) = &self.best {
            rows.push(crate::rundir::BudgetRow {
                stage: "final".into(),
                epochs_consumed: self.total_epochs,
                best_val_ppl: b.val_ppl,
                best_candidate: b.id,
            });
        }
        rows
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub selection_seconds: f64,
    pub extensive_seconds: f64,
    pub event_seconds: Vec<f64>,
}

pub struct SearchOutcome {
    pub report: SearchReport,
    pub timing: Timing,
    pub best_model: Option<SparseModel>,
}

struct Live<H> {
    config: CandidateConfig,
    handle: H,
    epochs: usize,
    failure: Option<String>,
}

struct RoundOutput {
    metrics: Vec<EpochMetrics>,
    spectrum: Option<LyapunovSpectrum>,
    failure: Option<String>,
}

fn train_round<E: CandidateEvaluator>(ev: &E, live: &mut Live<E::Handle>, epochs: usize, measure: bool) -> Result<RoundOutput> {
    let mut out = RoundOutput {
        metrics: Vec::new(),
        spectrum: None,
        failure: None,
    };
    if live.failure.is_some() {
        return Ok(out);
    }
    let mut run = || -> Result<()> {
        for _ in 0..epochs {
            out.metrics.push(ev.train_epoch(&mut live.handle)?);
            live.epochs += 1;
        }
        if measure {
            out.spectrum = Some(ev.spectrum(&live.handle)?);
        }
        Ok(())
    };
    match run() {
        Ok(()) => {}
        Err(e) if is_candidate_failure(&e) => {
            log::warn!("candidate {} failed: {e}", live.config.id);
            out.failure = Some(e.to_string());
            live.failure = out.failure.clone();
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

struct Proposer<'a> {
    cfg: &'a SearchConfig,
    seed: u64,
    grid: Vec<MethodChoice>,
    grid_cursor: usize,
}

impl Proposer<'_> {
    fn propose(&mut self, id: usize, archive: &[Observation]) -> MethodChoice {
        let seed = derive_seed(self.seed, "propose", id as u64);
        match self.cfg.sampler {
            SamplerKind::Tpe => tpe_propose(archive, &self.cfg.space, &self.cfg.tpe, seed),
            SamplerKind::Random => random_choice(&self.cfg.space, &mut rng_for(seed, "random", 0)),
            SamplerKind::Grid => {
                let c = self.grid[self.grid_cursor % self.grid.len()];
                self.grid_cursor += 1;
                c
            }
        }
    }
}

/// Runs selection and extensive training. With `out` set, artifacts are
/// written into the run directory as the run progresses; writes happen on the
/// calling thread in candidate order so output does not depend on `workers`.
pub fn lsh_run<E: CandidateEvaluator>(
    cfg: &SearchConfig,
    seed: u64,
    evaluator: &E,
    reference: Option<&LyapunovSpectrum>,
    mut out: Option<&mut RunDir>,
) -> Result<SearchOutcome> {
    let uses_spectra = cfg.criterion == Criterion::LsDistance;
    if uses_spectra && reference.is_none() {
        return Err(Error::InvalidArgument("ls_distance search needs a reference spectrum".into()));
    }
    let n0 = cfg.initial_pool();
    if n0 == 0 {
        return Err(Error::config("search.pool_size", "pool is empty"));
    }
    let e = cfg.epochs_per_event.max(1);
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|err| Error::InvalidArgument(format!("worker pool: {err}")))?;

    if let (Some(dir), Some(r)) = (out.as_deref(), reference) {
        dir.write_reference_spectrum(&r.exponents)?;
    }

    let mut proposer = Proposer {
        cfg,
        seed,
        grid: grid_candidates(cfg.grid_death_rate),
        grid_cursor: 0,
    };
    let mut summaries: Vec<CandidateSummary> = Vec::new();
    let mut pool: Vec<Live<E::Handle>> = Vec::new();
    let mut spectra_history: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut events: Vec<EventSummary> = Vec::new();
    let mut pool_sizes = vec![n0];
    let mut clamp_events = 0;
    let mut selection_epochs = 0;
    let mut formula_epochs = 0;
    let mut timing = Timing::default();
    let mut best_so_far: Option<(f64, usize)> = None;

    let mut spawn = |id: usize,
                     event: usize,
                     archive: &[Observation],
                     summaries: &mut Vec<CandidateSummary>|
     -> Result<Live<E::Handle>> {
        let choice = proposer.propose(id, archive);
        let config = CandidateConfig::new(seed, id, choice);
        let handle = evaluator.create(&config)?;
        summaries.push(CandidateSummary {
            id,
            config,
            status: CandidateStatus::Finalist,
            created_at: event,
            removed_at: None,
            selection_epochs: 0,
            extensive_epochs: 0,
            measurements: Vec::new(),
            failure: None,
            final_val_ppl: None,
            test_ppl: None,
        });
        Ok(Live {
            config,
            handle,
            epochs: 0,
            failure: None,
        })
    };

    for id in 0..n0 {
        pool.push(spawn(id, 0, &[], &mut summaries)?);
    }
    let mut next_id = n0;
    if let Some(dir) = out.as_deref_mut() {
        dir.record_pool(pool.iter().map(|l| PoolHistoryRow {
            event: 0,
            candidate_id: l.config.id,
            action: PoolAction::Generated,
            distance: None,
            val_loss: None,
        }))?;
    }

    let selection_start = Instant::now();
    let mut clock = 0;
    let mut event = 0;
    while clock < cfg.selection_epochs && pool.len() > cfg.final_k {
        let round_start = Instant::now();
        event += 1;
        clock += e;
        let n = pool.len();
        formula_epochs += n * e;

        let outputs: Vec<RoundOutput> = pool_threads.install(|| {
            pool.par_iter_mut()
                .map(|l| train_round(evaluator, l, e, uses_spectra))
                .collect::<Result<Vec<_>>>()
        })?;

        // Record measurements and write per-candidate artifacts in order.
        let mut val_losses = Vec::with_capacity(n);
        for (l, o) in pool.iter().zip(&outputs) {
            let s = summaries.iter_mut().find(|s| s.id == l.config.id).expect("summary exists");
            s.selection_epochs += o.metrics.len();
            selection_epochs += o.metrics.len();
            if let Some(dir) = out.as_deref() {
                for m in &o.metrics {
                    dir.append_metrics(l.config.id, m)?;
                }
            }
            if let Some(sp) = &o.spectrum {
                clamp_events += sp.clamp_events;
                if let Some(dir) = out.as_deref() {
                    dir.write_candidate_spectrum(l.config.id, l.epochs, &sp.exponents)?;
                }
                spectra_history.push((l.config.id, l.epochs, sp.exponents.clone()));
            }
            if o.failure.is_some() {
                s.failure = o.failure.clone();
            }
            val_losses.push(o.metrics.last().map(|m| m.val_loss));
        }

        // Distances in an embedding refit on everything seen so far.
        let mut distances: Vec<Option<f64>> = vec![None; n];
        if uses_spectra {
            let reference = reference.expect("checked above");
            let views: Vec<&[f64]> = spectra_history.iter().map(|(_, _, s)| s.as_slice()).collect();
            let model = fit_embedding(&reference.exponents, &views, cfg.embedding)?;
            let ref_point = model.project(&reference.exponents)?;
            let dist_to_ref = |p: &[f64]| match distance(p, &ref_point, cfg.metric) {
                Ok(d) => Ok(d),
                Err(Error::UndefinedDistance(_)) => Ok(f64::INFINITY),
                Err(err) => Err(err),
            };
            let mut rows = vec![EmbeddingRow {
                candidate_id: "reference".into(),
                epoch: 0,
                x: ref_point[0],
                y: ref_point.get(1).copied().unwrap_or(0.0),
                distance_to_reference: 0.0,
            }];
            for (id, epoch, s) in &spectra_history {
                let p = model.project(s)?;
                rows.push(EmbeddingRow {
                    candidate_id: id.to_string(),
                    epoch: *epoch,
                    x: p[0],
                    y: p.get(1).copied().unwrap_or(0.0),
                    distance_to_reference: dist_to_ref(&p)?,
                });
            }
            for (i, o) in outputs.iter().enumerate() {
                if let Some(sp) = &o.spectrum {
                    distances[i] = Some(dist_to_ref(&model.project(&sp.exponents)?)?);
                }
            }
            if let Some(dir) = out.as_deref() {
                dir.write_embedding(event, &rows)?;
            }
        }

        for (i, l) in pool.iter().enumerate() {
            if l.failure.is_some() {
                continue;
            }
            let s = summaries.iter_mut().find(|s| s.id == l.config.id).expect("summary exists");
            let val_loss = val_losses[i].expect("trained candidates have metrics");
            s.measurements.push(Measurement {
                event,
                epoch: l.epochs,
                distance: distances[i],
                val_loss,
            });
            let ppl = val_loss.exp();
            if best_so_far.is_none_or(|(b, bid)| ppl < b || (ppl == b && l.config.id < bid)) {
                best_so_far = Some((ppl, l.config.id));
            }
        }

        let scores: Vec<(usize, Option<f64>)> = pool
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let s = if l.failure.is_some() {
                    Some(f64::INFINITY)
                } else {
                    match cfg.criterion {
                        Criterion::LsDistance => distances[i],
                        Criterion::ValLoss => val_losses[i],
                    }
                };
                (l.config.id, s)
            })
            .collect();
        let measurement = match cfg.criterion {
            Criterion::LsDistance => "ls_distance",
            Criterion::ValLoss => "val_loss",
        };
        let ranked = rank_candidates(&scores, measurement)?;

        let keep = keep_count(n, cfg.final_k);
        let mut kept_ids = Vec::new();
        let mut rows = Vec::new();
        let mut failed = 0;
        for (id, _) in &ranked {
            let i = pool.iter().position(|l| l.config.id == *id).expect("ranked from pool");
            let action = if pool[i].failure.is_some() {
                failed += 1;
                PoolAction::Failed
            } else if kept_ids.len() < keep {
                kept_ids.push(*id);
                PoolAction::Kept
            } else {
                PoolAction::Removed
            };
            if action != PoolAction::Kept {
                let s = summaries.iter_mut().find(|s| s.id == *id).expect("summary exists");
                s.removed_at = Some(event);
                s.status = if action == PoolAction::Failed {
                    CandidateStatus::Failed
                } else {
                    CandidateStatus::Removed
                };
            }
            rows.push(PoolHistoryRow {
                event,
                candidate_id: *id,
                action,
                distance: distances[i],
                val_loss: val_losses[i],
            });
        }
        pool.retain(|l| kept_ids.contains(&l.config.id));
        pool.sort_by_key(|l| l.config.id);

        let generate = generate_count(n, kept_ids.len(), cfg.final_k);
        let archive: Vec<Observation> = summaries
            .iter()
            .filter_map(|s| {
                let score = if s.failure.is_some() {
                    f64::INFINITY
                } else {
                    let m = s.measurements.last()?;
                    match cfg.criterion {
                        Criterion::LsDistance => m.distance.unwrap_or(f64::INFINITY),
                        Criterion::ValLoss => m.val_loss,
                    }
                };
                Some(Observation {
                    choice: s.config.choice,
                    score,
                })
            })
            .collect();
        for _ in 0..generate {
            let live = spawn(next_id, event, &archive, &mut summaries)?;
            rows.push(PoolHistoryRow {
                event,
                candidate_id: next_id,
                action: PoolAction::Generated,
                distance: None,
                val_loss: None,
            });
            pool.push(live);
            next_id += 1;
        }
        if let Some(dir) = out.as_deref_mut() {
            dir.record_pool(rows)?;
        }

        let (best_val_ppl, best_candidate) = best_so_far.unwrap_or((f64::INFINITY, 0));
        events.push(EventSummary {
            event,
            clock,
            pool_before: n,
            kept: kept_ids.len(),
            removed: n - kept_ids.len() - failed,
            failed,
            generated: generate,
            pool_after: pool.len(),
            epochs_consumed: selection_epochs,
            best_val_ppl,
            best_candidate,
        });
        pool_sizes.push(pool.len());
        timing.event_seconds.push(round_start.elapsed().as_secs_f64());
        log::info!(
            "event {event}: pool {n} -> {} (kept {}, generated {generate}, failed {failed})",
            pool.len(),
            kept_ids.len()
        );
    }
    timing.selection_seconds = selection_start.elapsed().as_secs_f64();

    // Extensive training of the survivors.
    let extensive_start = Instant::now();
    let cap = cfg.extensive_epochs;
    let finished: Vec<std::result::Result<Finished, String>> = pool_threads.install(|| {
        pool.par_iter_mut()
            .map(|l| match evaluator.finish(&mut l.handle, cap) {
                Ok(f) => Ok(Ok(f)),
                Err(err) if is_candidate_failure(&err) => {
                    log::warn!("candidate {} failed in extensive training: {err}", l.config.id);
                    Ok(Err(err.to_string()))
                }
                Err(err) => Err(err),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    timing.extensive_seconds = extensive_start.elapsed().as_secs_f64();

    let mut extensive_epochs = 0;
    let mut best: Option<(f64, BestCandidate, Option<SparseModel>)> = None;
    for (l, f) in pool.iter().zip(finished) {
        let s = summaries.iter_mut().find(|s| s.id == l.config.id).expect("summary exists");
        match f {
            Ok(f) => {
                s.extensive_epochs = f.history.len();
                extensive_epochs += f.history.len();
                s.final_val_ppl = Some(f.val_ppl);
                s.test_ppl = f.test_ppl;
                if let Some(dir) = out.as_deref() {
                    for m in &f.history {
                        dir.append_metrics(l.config.id, m)?;
                    }
                }
                let key = if f.val_ppl.is_finite() { f.val_ppl } else { f64::INFINITY };
                // Pool is in id order, so a strict comparison breaks ties by id.
                if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
                    let b = BestCandidate {
                        id: l.config.id,
                        config: l.config,
                        val_ppl: f.val_ppl,
                        test_ppl: f.test_ppl,
                        epochs: s.selection_epochs + s.extensive_epochs,
                    };
                    best = Some((key, b, f.model));
                }
            }
            Err(msg) => {
                s.status = CandidateStatus::Failed;
                s.failure = Some(msg);
            }
        }
    }
    summaries.sort_by_key(|s| s.id);

    let (best, best_model) = match best {
        Some((_, b, m)) => (Some(b), m),
        None => (None, None),
    };
    if let (Some(dir), Some(m)) = (out.as_deref(), &best_model) {
        crate::checkpoint::save_checkpoint(m, &dir.root().join("best.ckpt"))?;
    }

    let reference_summary = match reference {
        Some(r) => Some(ReferenceSummary {
            dim: r.exponents.len(),
            stats: spectrum_stats(&r.exponents)?,
            clamp_events: r.clamp_events,
        }),
        None => None,
    };
    let report = SearchReport {
        seed,
        criterion: cfg.criterion,
        sampler: cfg.sampler,
        embedding: cfg.embedding,
        metric: cfg.metric,
        uses_spectra,
        initial_pool: n0,
        epochs_per_event: e,
        selection_epoch_limit: cfg.selection_epochs,
        final_k: cfg.final_k,
        pool_sizes,
        expected_pool_sizes: pool_trajectory(n0, e, cfg.selection_epochs, cfg.final_k),
        events,
        selection_epochs,
        selection_epochs_formula: formula_epochs,
        extensive_epochs,
        total_epochs: selection_epochs + extensive_epochs,
        clamp_events,
        reference: reference_summary,
        failed: summaries
            .iter()
            .filter(|s| s.status == CandidateStatus::Failed)
            .map(|s| s.id)
            .collect(),
        candidates: summaries,
        best,
    };
    if let Some(dir) = out.as_deref() {
        dir.write_json("report.json", &report)?;
        dir.write_json("timing.json", &timing)?;
    }
    Ok(SearchOutcome {
        report,
        timing,
        best_model,
    })
}
