use crate::seed::rng_for;
use crate::sparsity::{DeathMode, InitMode, RedistMode};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// The pruning-method part of a candidate: three categorical choices and a
/// death rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodChoice {
    pub init_mode: InitMode,
    pub death_mode: DeathMode,
    pub redist_mode: RedistMode,
    pub death_rate: f64,
}

/// Search space: the full categorical grid and a closed death-rate range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpace {
    pub death_rate_min: f64,
    pub death_rate_max: f64,
}

impl Default for SamplerSpace {
    fn default() -> Self {
        Self {
            death_rate_min: 0.4,
            death_rate_max: 0.9,
        }
    }
}

impl SamplerSpace {
    pub const GRID_SIZE: usize = InitMode::ALL.len() * DeathMode::ALL.len() * RedistMode::ALL.len();

    pub fn contains(&self, c: &MethodChoice) -> bool {
        (self.death_rate_min..=self.death_rate_max).contains(&c.death_rate)
    }

    pub fn clip(&self, rate: f64) -> f64 {
        rate.clamp(self.death_rate_min, self.death_rate_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpeSettings {
    /// Fraction of the archive forming the "good" set.
    pub gamma: f64,
    /// Draws from the good model per proposal.
    pub proposals: usize,
    pub bandwidth_floor: f64,
    /// Below this many observations proposals are uniform.
    pub min_observations: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            proposals: 24,
            bandwidth_floor: 1e-3,
            min_observations: 5,
        }
    }
}

/// A scored past configuration; lower scores are better, non-finite scores
/// rank last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub choice: MethodChoice,
    pub score: f64,
}

pub fn random_choice<R: Rng + ?Sized>(space: &SamplerSpace, rng: &mut R) -> MethodChoice {
    MethodChoice {
        init_mode: *InitMode::ALL.choose(rng).expect("nonempty"),
        death_mode: *DeathMode::ALL.choose(rng).expect("nonempty"),
        redist_mode: *RedistMode::ALL.choose(rng).expect("nonempty"),
        death_rate: rng.random_range(space.death_rate_min..=space.death_rate_max),
    }
}

/// All 24 categorical combinations at one death rate, ordered by init mode,
/// then death mode, then redistribution mode.
pub fn grid_candidates(death_rate: f64) -> Vec<MethodChoice> {
    let mut out = Vec::with_capacity(SamplerSpace::GRID_SIZE);
    for init_mode in InitMode::ALL {
        for death_mode in DeathMode::ALL {
            for redist_mode in RedistMode::ALL {
                out.push(MethodChoice {
                    init_mode,
                    death_mode,
                    redist_mode,
                    death_rate,
                });
            }
        }
    }
    out
}

/// Laplace-smoothed frequency of each category value among `values`.
fn categorical_weights<T: PartialEq + Copy>(all: &[T], values: &[T]) -> Vec<f64> {
    let denom = (values.len() + all.len()) as f64;
    all.iter()
        .map(|a| (values.iter().filter(|v| *v == a).count() + 1) as f64 / denom)
        .collect()
}

fn weight_of<T: PartialEq>(all: &[T], weights: &[f64], v: &T) -> f64 {
    weights[all.iter().position(|a| a == v).expect("value from the domain")]
}

fn sample_weighted<T: Copy, R: Rng + ?Sized>(all: &[T], weights: &[f64], rng: &mut R) -> T {
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (a, w) in all.iter().zip(weights) {
        if u < *w {
            return *a;
        }
        u -= w;
    }
    *all.last().expect("nonempty")
}

/// Gaussian kernel density with a Scott-rule bandwidth.
struct Kde {
    points: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    fn fit(points: Vec<f64>, floor: f64) -> Self {
        let n = points.len() as f64;
        let mean = points.iter().sum::<f64>() / n;
        let std = (points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
        let bandwidth = (1.06 * std * n.powf(-0.2)).max(floor);
        Self { points, bandwidth }
    }

    fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        self.points
            .iter()
            .map(|p| norm * (-0.5 * ((x - p) / h).powi(2)).exp())
            .sum::<f64>()
            / self.points.len() as f64
    }
}

struct Density {
    init: Vec<f64>,
    death: Vec<f64>,
    redist: Vec<f64>,
    rate: Kde,
}

impl Density {
    fn fit(obs: &[&Observation], floor: f64) -> Self {
        let init: Vec<InitMode> = obs.iter().map(|o| o.choice.init_mode).collect();
        let death: Vec<DeathMode> = obs.iter().map(|o| o.choice.death_mode).collect();
        let redist: Vec<RedistMode> = obs.iter().map(|o| o.choice.redist_mode).collect();
        Self {
            init: categorical_weights(&InitMode::ALL, &init),
            death: categorical_weights(&DeathMode::ALL, &death),
            redist: categorical_weights(&RedistMode::ALL, &redist),
            rate: Kde::fit(obs.iter().map(|o| o.choice.death_rate).collect(), floor),
        }
    }

    fn log_density(&self, c: &MethodChoice) -> f64 {
        weight_of(&InitMode::ALL, &self.init, &c.init_mode).ln()
            + weight_of(&DeathMode::ALL, &self.death, &c.death_mode).ln()
            + weight_of(&RedistMode::ALL, &self.redist, &c.redist_mode).ln()
            + self.rate.density(c.death_rate).max(f64::MIN_POSITIVE).ln()
    }

    fn sample<R: Rng + ?Sized>(&self, space: &SamplerSpace, rng: &mut R) -> MethodChoice {
        let center = *self.rate.points.choose(rng).expect("nonempty");
        let noise = Normal::new(0.0, self.rate.bandwidth).expect("positive bandwidth");
        MethodChoice {
            init_mode: sample_weighted(&InitMode::ALL, &self.init, rng),
            death_mode: sample_weighted(&DeathMode::ALL, &self.death, rng),
            redist_mode: sample_weighted(&RedistMode::ALL, &self.redist, rng),
            death_rate: space.clip(center + noise.sample(rng)),
        }
    }
}

/// Tree-structured Parzen estimator proposal.
///
/// The archive is split at the `gamma` quantile of the score into good and
/// bad sets, each modelled by independent per-axis densities. The best of
/// `proposals` draws from the good model under `l(x) / g(x)` is returned.
/// With fewer than `min_observations` entries the proposal is uniform.
pub fn tpe_propose(archive: &[Observation], space: &SamplerSpace, settings: &TpeSettings, seed: u64) -> MethodChoice {
    let mut rng = rng_for(seed, "tpe", 0);
    if archive.len() < settings.min_observations.max(2) {
        return random_choice(space, &mut rng);
    }
    let mut order: Vec<&Observation> = archive.iter().collect();
    order.sort_by(|a, b| {
        let key = |o: &Observation| if o.score.is_finite() { o.score } else { f64::INFINITY };
        key(a).total_cmp(&key(b))
    });
    let n_good = ((settings.gamma * order.len() as f64).ceil() as usize).clamp(1, order.len() - 1);
    let good = Density::fit(&order[..n_good], settings.bandwidth_floor);
    let bad = Density::fit(&order[n_good..], settings.bandwidth_floor);

    let mut best: Option<(f64, MethodChoice)> = None;
    for _ in 0..settings.proposals.max(1) {
        let c = good.sample(space, &mut rng);
        let score = good.log_density(&c) - bad.log_density(&c);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, c));
        }
    }
    best.expect("at least one proposal").1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_24_distinct_entries() {
        let g = grid_candidates(0.8);
        assert_eq!(g.len(), 24);
        for (i, a) in g.iter().enumerate() {
            assert_eq!(a.death_rate, 0.8);
            for b in &g[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn empty_archive_is_seeded_random() {
        let space = SamplerSpace::default();
        let s = TpeSettings::default();
        let a = tpe_propose(&[], &space, &s, 7);
        assert_eq!(a, tpe_propose(&[], &space, &s, 7));
        assert!(space.contains(&a));
    }

    #[test]
    fn good_modes_are_favoured() {
        let space = SamplerSpace::default();
        let s = TpeSettings::default();
        let mut archive = Vec::new();
        for i in 0..16 {
            let good = i < 4;
            archive.push(Observation {
                choice: MethodChoice {
                    init_mode: InitMode::ALL[i % 2],
                    death_mode: if good { DeathMode::Set } else { DeathMode::ALL[i % 4] },
                    redist_mode: RedistMode::ALL[i % 3],
                    death_rate: 0.4 + 0.03 * i as f64,
                },
                score: if good { 0.1 * i as f64 } else { 10.0 + i as f64 },
            });
        }
        let hits = (0..1000)
            .filter(|&seed| tpe_propose(&archive, &space, &s, seed).death_mode == DeathMode::Set)
            .count();
        assert!(hits > 250, "set proposed {hits} / 1000 times");
    }

    #[test]
    fn rates_stay_in_bounds() {
        let space = SamplerSpace::default();
        let s = TpeSettings::default();
        let archive: Vec<Observation> = (0..8)
            .map(|i| Observation {
                choice: MethodChoice {
                    init_mode: InitMode::Er,
                    death_mode: DeathMode::Magnitude,
                    redist_mode: RedistMode::None,
                    death_rate: if i % 2 == 0 { 0.4 } else { 0.9 },
                },
                score: if i == 7 { f64::INFINITY } else { i as f64 },
            })
            .collect();
        for seed in 0..300 {
            assert!(space.contains(&tpe_propose(&archive, &space, &s, seed)));
        }
    }

    #[test]
    fn smoothed_weights_sum_to_one() {
        let w = categorical_weights(&DeathMode::ALL, &[DeathMode::Set, DeathMode::Set]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[2], 3.0 / 6.0);
    }
}
