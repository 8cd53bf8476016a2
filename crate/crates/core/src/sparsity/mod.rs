//! Dynamic sparse training primitives: sparse initialization, death,
//! redistribution, growth and the cosine death-rate schedule.
//!
//! A prune-regrow cycle is `apply_death -> redistribute -> grow`; it never
//! changes the total number of active weights.

mod mask;

pub use mask::{Mask, MaskSet};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use mask::nonzero_budget;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Uniform,
    Er,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathMode {
    Magnitude,
    GlobalMagnitude,
    Set,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedistMode {
    None,
    Magnitude,
    Nonzeros,
}

impl InitMode {
    pub const ALL: [InitMode; 2] = [InitMode::Uniform, InitMode::Er];
}

impl DeathMode {
    pub const ALL: [DeathMode; 4] = [
        DeathMode::Magnitude,
        DeathMode::GlobalMagnitude,
        DeathMode::Set,
        DeathMode::Threshold,
    ];
}

impl RedistMode {
    pub const ALL: [RedistMode; 3] = [RedistMode::None, RedistMode::Magnitude, RedistMode::Nonzeros];
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(s.as_str().unwrap_or_default())
            }
        }
    )*};
}
display_via_serde!(InitMode, DeathMode, RedistMode);

/// Initial masks for prunable matrices of the given `(rows, cols)` shapes.
///
/// `Uniform` gives every layer density `1 - sparsity`. `Er` makes density
/// proportional to `(rows + cols) / (rows * cols)`, scaled to the global
/// budget; layers that would exceed density 1 are clipped to dense and the
/// excess is spread over the rest. Per-layer counts are rounded and then
/// trued up one weight at a time (largest rounding residual first) so the
/// total equals `round((1 - sparsity) * total)` exactly.
pub fn sparse_init(shapes: &[(usize, usize)], mode: InitMode, global_sparsity: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&global_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "global sparsity must lie in [0, 1), got {global_sparsity}"
        )));
    }
    let sizes: Vec<usize> = shapes.iter().map(|&(r, c)| r * c).collect();
    let total: usize = sizes.iter().sum();
    let budget = nonzero_budget(total, global_sparsity);

    let densities = match mode {
        InitMode::Uniform => vec![1.0 - global_sparsity; shapes.len()],
        InitMode::Er => er_densities(shapes, budget),
    };
    let targets: Vec<f64> = densities.iter().zip(&sizes).map(|(d, &n)| d * n as f64).collect();
    let counts = true_up(&targets, &sizes, budget);

    let masks = shapes
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(l, (&(rows, cols), &count))| {
            let mut rng = rng_for(seed, "sparse_init", l as u64);
            let mut mask = Mask::zeros(rows, cols);
            for idx in rand::seq::index::sample(&mut rng, rows * cols, count) {
                mask.set(idx, true);
            }
            mask
        })
        .collect();
    Ok(MaskSet {
        masks,
        global_sparsity,
    })
}

fn er_densities(shapes: &[(usize, usize)], budget: usize) -> Vec<f64> {
    let raw: Vec<f64> = shapes
        .iter()
        .map(|&(r, c)| {
            if r == 0 || c == 0 {
                0.0
            } else {
                (r + c) as f64 / (r * c) as f64
            }
        })
        .collect();
    let sizes: Vec<f64> = shapes.iter().map(|&(r, c)| (r * c) as f64).collect();
    let mut dense = vec![false; shapes.len()];
    loop {
        let fixed: f64 = (0..shapes.len()).filter(|&l| dense[l]).map(|l| sizes[l]).sum();
        let weight: f64 = (0..shapes.len()).filter(|&l| !dense[l]).map(|l| raw[l] * sizes[l]).sum();
        let eps = if weight > 0.0 {
            (budget as f64 - fixed) / weight
        } else {
            0.0
        };
        let mut changed = false;
        for l in 0..shapes.len() {
            if !dense[l] && eps * raw[l] > 1.0 {
                dense[l] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..shapes.len())
                .map(|l| if dense[l] { 1.0 } else { (eps * raw[l]).max(0.0) })
                .collect();
        }
    }
}

/// Rounds `targets` to integer counts bounded by `caps` whose sum is exactly
/// `budget` (assumes `budget <= sum(caps)`).
fn true_up(targets: &[f64], caps: &[usize], budget: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets
        .iter()
        .zip(caps)
        .map(|(t, &cap)| (t.round().max(0.0) as usize).min(cap))
        .collect();
    let mut sum: usize = counts.iter().sum();
    while sum != budget {
        let residual = |l: usize| targets[l] - counts[l] as f64;
        let pick = if sum < budget {
            (0..counts.len())
                .filter(|&l| counts[l] < caps[l])
                .max_by(|&a, &b| residual(a).total_cmp(&residual(b)).then(b.cmp(&a)))
        } else {
            (0..counts.len())
                .filter(|&l| counts[l] > 0)
                .min_by(|&a, &b| residual(a).total_cmp(&residual(b)).then(a.cmp(&b)))
        };
        let Some(l) = pick else { break };
        if sum < budget {
            counts[l] += 1;
            sum += 1;
        } else {
            counts[l] -= 1;
            sum -= 1;
        }
    }
    counts
}

fn check_layers(weights: &[&[f64]], masks: &MaskSet) -> Result<()> {
    if weights.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} weight tensors for {} masks",
            weights.len(),
            masks.len()
        )));
    }
    for (l, (w, m)) in weights.iter().zip(&masks.masks).enumerate() {
        if w.len() != m.len() {
            return Err(Error::Dimension(format!(
                "layer {l}: {} weights for a mask of {}",
                w.len(),
                m.len()
            )));
        }
    }
    Ok(())
}

fn by_magnitude(w: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b))
}

/// Switches off active weights.
///
/// Per layer, `k = floor(rate * nonzeros)` weights are removed
/// (`GlobalMagnitude` instead removes `floor(rate * total nonzeros)` over all
/// layers pooled):
/// - `Magnitude`: smallest `|w|`.
/// - `Set`: the `ceil(k/2)` smallest non-negative weights and the `floor(k/2)`
///   negative weights closest to zero; a side that runs short hands its
///   remainder to the other.
/// - `Threshold`: weights with `|w|` below the `rate`-quantile of the active
///   magnitudes, then trimmed or extended in magnitude order to exactly `k`.
///
/// Ties break by (layer index, flat index) ascending.
pub fn apply_death(weights: &[&[f64]], masks: &MaskSet, rate: f64, mode: DeathMode) -> Result<(MaskSet, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("death rate must lie in [0, 1], got {rate}")));
    }
    check_layers(weights, masks)?;
    let mut out = masks.clone();
    let mut removed = vec![0; masks.len()];

    if mode == DeathMode::GlobalMagnitude {
        let mut pool: Vec<(usize, usize)> = masks
            .masks
            .iter()
            .enumerate()
            .flat_map(|(l, m)| (0..m.len()).filter(move |&i| m.is_active(i)).map(move |i| (l, i)))
            .collect();
        let k = (rate * pool.len() as f64).floor() as usize;
        pool.sort_by(|&(la, ia), &(lb, ib)| {
            weights[la][ia]
                .abs()
                .total_cmp(&weights[lb][ib].abs())
                .then(la.cmp(&lb))
                .then(ia.cmp(&ib))
        });
        for &(l, i) in &pool[..k] {
            out.masks[l].set(i, false);
            removed[l] += 1;
        }
        return Ok((out, removed));
    }

    for (l, (w, m)) in weights.iter().zip(&masks.masks).enumerate() {
        let active: Vec<usize> = (0..m.len()).filter(|&i| m.is_active(i)).collect();
        let k = (rate * active.len() as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let victims = match mode {
            DeathMode::Magnitude => {
                let mut order = active;
                order.sort_by(by_magnitude(w));
                order.truncate(k);
                order
            }
            DeathMode::Set => set_victims(w, &active, k),
            DeathMode::Threshold => threshold_victims(w, &active, k, rate),
            DeathMode::GlobalMagnitude => unreachable!(),
        };
        for i in victims {
            out.masks[l].set(i, false);
        }
        removed[l] = k;
    }
    Ok((out, removed))
}

fn set_victims(w: &[f64], active: &[usize], k: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = active.iter().copied().filter(|&i| w[i] >= 0.0).collect();
    let mut neg: Vec<usize> = active.iter().copied().filter(|&i| w[i] < 0.0).collect();
    pos.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    neg.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let want_pos = k.div_ceil(2);
    let want_neg = k - want_pos;
    let take_pos = want_pos.min(pos.len()) + want_neg.saturating_sub(neg.len());
    let take_neg = k - take_pos;
    pos.truncate(take_pos);
    neg.truncate(take_neg);
    pos.extend(neg);
    pos
}

fn threshold_victims(w: &[f64], active: &[usize], k: usize, rate: f64) -> Vec<usize> {
    let mut mags: Vec<f64> = active.iter().map(|&i| w[i].abs()).collect();
    mags.sort_by(f64::total_cmp);
    let pos = rate * (mags.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let tau = mags[lo] + (mags[hi] - mags[lo]) * (pos - lo as f64);

    let (mut below, mut rest): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&i| w[i].abs() < tau);
    below.sort_by(by_magnitude(w));
    if below.len() >= k {
        below.truncate(k);
    } else {
        rest.sort_by(by_magnitude(w));
        let missing = k - below.len();
        below.extend(rest.into_iter().take(missing));
    }
    below
}

/// Growth quota per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Redistribution {
    pub quotas: Vec<usize>,
    /// Set when the requested mode had no signal and `None` was used instead.
    pub fell_back: bool,
}

/// Splits the total removed count across layers.
///
/// `None` regrows where weights died; `Magnitude` is proportional to the mean
/// `|w|` of the surviving weights in each layer; `Nonzeros` is proportional to
/// each layer's surviving count. Fractional shares are resolved by largest
/// remainder (ties to the lower layer index), so the quotas always sum to the
/// number removed. `masks` must be the post-death masks.
pub fn redistribute(removed: &[usize], weights: &[&[f64]], masks: &MaskSet, mode: RedistMode) -> Result<Redistribution> {
    check_layers(weights, masks)?;
    if removed.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} removal counts for {} layers",
            removed.len(),
            masks.len()
        )));
    }
    let scores: Vec<f64> = match mode {
        RedistMode::None => {
            return Ok(Redistribution {
                quotas: removed.to_vec(),
                fell_back: false,
            })
        }
        RedistMode::Magnitude => weights
            .iter()
            .zip(&masks.masks)
            .map(|(w, m)| {
                let (sum, n) = (0..m.len())
                    .filter(|&i| m.is_active(i))
                    .fold((0.0, 0usize), |(s, n), i| (s + w[i].abs(), n + 1));
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            })
            .collect(),
        RedistMode::Nonzeros => masks.masks.iter().map(|m| m.nonzeros() as f64).collect(),
    };
    let total_score: f64 = scores.iter().sum();
    if !(total_score > 0.0) || !total_score.is_finite() {
        log::warn!("redistribution mode {mode} has no signal; regrowing where weights died");
        return Ok(Redistribution {
            quotas: removed.to_vec(),
            fell_back: true,
        });
    }
    let total: usize = removed.iter().sum();
    Ok(Redistribution {
        quotas: largest_remainder(&scores, total),
        fell_back: false,
    })
}

fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &l in order.iter().take(total.saturating_sub(assigned)) {
        quotas[l] += 1;
    }
    quotas
}

/// Activates `quotas[l]` inactive positions in each layer, uniformly at
/// random. Quota a layer cannot hold spills to the layers with the most
/// remaining inactive capacity (ties to the lower index). Newly grown weights
/// start at zero: they were masked, so the model already holds 0 there.
pub fn grow(masks: &MaskSet, quotas: &[usize], seed: u64) -> Result<MaskSet> {
    if quotas.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} growth quotas for {} layers",
            quotas.len(),
            masks.len()
        )));
    }
    let inactive: Vec<usize> = masks.masks.iter().map(Mask::inactive).collect();
    let requested: usize = quotas.iter().sum();
    let available: usize = inactive.iter().sum();
    if requested > available {
        return Err(Error::Capacity { requested, available });
    }
    let mut take: Vec<usize> = quotas.iter().zip(&inactive).map(|(&q, &c)| q.min(c)).collect();
    let mut overflow: usize = requested - take.iter().sum::<usize>();
    while overflow > 0 {
        let l = (0..take.len())
            .max_by(|&a, &b| (inactive[a] - take[a]).cmp(&(inactive[b] - take[b])).then(b.cmp(&a)))
            .expect("capacity checked above");
        let room = inactive[l] - take[l];
        let add = room.min(overflow);
        take[l] += add;
        overflow -= add;
    }

    let mut out = masks.clone();
    for (l, mask) in out.masks.iter_mut().enumerate() {
        if take[l] == 0 {
            continue;
        }
        let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask.is_active(i)).collect();
        let mut rng = rng_for(seed, "grow", l as u64);
        for j in rand::seq::index::sample(&mut rng, free.len(), take[l]) {
            mask.set(free[j], true);
        }
    }
    Ok(out)
}

/// `initial / 2 * (1 + cos(pi * epoch / total))`, with `epoch` clamped to
/// `[0, total]`.
pub fn cosine_decay(initial_rate: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return initial_rate;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    initial_rate / 2.0 * (1.0 + (std::f64::consts::PI * t).cos())
}
