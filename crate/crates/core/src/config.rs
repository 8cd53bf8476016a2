//! Run configuration: schema, built-in profiles, validation and `key=value`
//! overrides.

use crate::error::{Error, Result};
use crate::lyapunov::StateSpace;
use crate::ls_space::{DistanceMetric, EmbeddingMethod};
use crate::search::{SamplerSpace, TpeSettings};
use crate::training::{ArchKind, ModelSpec, Tokenization, TrainSettings};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LSH_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Tpe,
    Random,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    LsDistance,
    ValLoss,
}

/// Named initial pool sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetTier {
    Small,
    Medium,
    Large,
}

impl BudgetTier {
    pub fn pool_size(self) -> usize {
        match self {
            BudgetTier::Small => 24,
            BudgetTier::Medium => 30,
            BudgetTier::Large => 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    pub tokenization: Tokenization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub coupled: bool,
    pub tied: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub nonmono: usize,
    pub batch_size: usize,
    pub bptt: usize,
    pub eval_batch_size: usize,
    pub batches_per_epoch: Option<usize>,
    pub eval_blocks: Option<usize>,
    /// Epoch cap for the dense reference.
    pub dense_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsConfig {
    pub k: usize,
    pub t: usize,
    pub warmup: usize,
    pub state_space: StateSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub budget_tier: Option<BudgetTier>,
    pub pool_size: Option<usize>,
    /// Epochs between removal events (E).
    pub epochs_per_event: usize,
    /// Total selection epochs (m).
    pub selection_epochs: usize,
    /// Survivor floor handed to extensive training.
    pub final_k: usize,
    /// Per-candidate epoch cap including selection epochs.
    pub extensive_epochs: usize,
    pub sampler: SamplerKind,
    pub criterion: Criterion,
    pub embedding: EmbeddingMethod,
    pub metric: DistanceMetric,
    /// Death rate used by the grid sampler.
    pub grid_death_rate: f64,
    pub space: SamplerSpace,
    pub tpe: TpeSettings,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Fraction of prunable weights that are zero.
    pub sparsity: f64,
    pub train: TrainConfig,
    pub ls: LsConfig,
    pub search: SearchConfig,
    pub output_dir: Option<PathBuf>,
    /// Dense reference checkpoint; trained and written here when missing.
    pub reference_checkpoint: Option<PathBuf>,
}

impl SearchConfig {
    /// Explicit pool size, else the budget tier's, else 0.
    pub fn initial_pool(&self) -> usize {
        self.pool_size.or(self.budget_tier.map(BudgetTier::pool_size)).unwrap_or(0)
    }
}

pub const PROFILES: [&str; 4] = ["desk", "desk-rhn", "paper", "paper-rhn"];

impl RunConfig {
    /// Laptop-scale stacked LSTM on the bundled character corpus.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig {
                path: PathBuf::from("data/corpus.txt"),
                tokenization: Tokenization::Char,
            },
            model: ModelConfig {
                arch: ArchKind::StackedLstm,
                embed: 64,
                hidden: 64,
                layers: 2,
                coupled: false,
                tied: false,
                dropout: 0.1,
            },
            sparsity: 0.67,
            train: TrainConfig {
                lr: 20.0,
                clip: 0.25,
                nonmono: 5,
                batch_size: 20,
                bptt: 35,
                eval_batch_size: 10,
                batches_per_epoch: Some(60),
                eval_blocks: Some(40),
                dense_epochs: 40,
            },
            ls: LsConfig {
                k: 2,
                t: 100,
                warmup: 10,
                state_space: StateSpace::Full,
            },
            search: SearchConfig {
                budget_tier: Some(BudgetTier::Small),
                pool_size: None,
                epochs_per_event: 3,
                selection_epochs: 12,
                final_k: 3,
                extensive_epochs: 30,
                sampler: SamplerKind::Tpe,
                criterion: Criterion::LsDistance,
                embedding: EmbeddingMethod::Pca,
                metric: DistanceMetric::L2,
                grid_death_rate: 0.8,
                space: SamplerSpace::default(),
                tpe: TpeSettings::default(),
                workers: 1,
            },
            output_dir: None,
            reference_checkpoint: None,
        }
    }

    /// Desk scale with a coupled, tied recurrent highway network.
    pub fn desk_rhn() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig {
            arch: ArchKind::Rhn,
            embed: 64,
            hidden: 64,
            layers: 2,
            coupled: true,
            tied: true,
            dropout: 0.1,
        };
        c.train.lr = 15.0;
        c
    }

    /// Full-size stacked LSTM settings on a word-level corpus. Not run by the
    /// tests.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.corpus.tokenization = Tokenization::Word;
        c.model = ModelConfig {
            arch: ArchKind::StackedLstm,
            embed: 1500,
            hidden: 1500,
            layers: 2,
            coupled: false,
            tied: false,
            dropout: 0.0,
        };
        c.train = TrainConfig {
            lr: 40.0,
            clip: 0.25,
            nonmono: 5,
            batch_size: 20,
            bptt: 35,
            eval_batch_size: 10,
            batches_per_epoch: None,
            eval_blocks: None,
            dense_epochs: 100,
        };
        c.ls.t = 200;
        c.search.extensive_epochs = 100;
        c
    }

    /// Full-size RHN settings (recurrence depth 10).
    pub fn paper_rhn() -> Self {
        let mut c = Self::paper();
        c.model = ModelConfig {
            arch: ArchKind::Rhn,
            embed: 830,
            hidden: 830,
            layers: 10,
            coupled: true,
            tied: true,
            dropout: 0.0,
        };
        c.train.lr = 15.0;
        c.train.dense_epochs = 500;
        c.search.extensive_epochs = 500;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "desk-rhn" => Ok(Self::desk_rhn()),
            "paper" => Ok(Self::paper()),
            "paper-rhn" => Ok(Self::paper_rhn()),
            _ => Err(Error::config("profile", format!("unknown profile `{name}`, expected one of {PROFILES:?}"))),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.search.initial_pool()
    }

    pub fn model_spec(&self, vocab: usize) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            arch: m.arch,
            vocab,
            embed: m.embed,
            hidden: m.hidden,
            layers: m.layers,
            coupled: m.coupled,
            tied: m.tied,
            dropout: m.dropout,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        let t = &self.train;
        TrainSettings {
            lr: t.lr,
            clip: t.clip,
            nonmono: t.nonmono,
            batches_per_epoch: t.batches_per_epoch,
            eval_blocks: t.eval_blocks,
        }
    }

    /// Checks every field against its domain.
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::config(field, "must be a positive integer"));
            }
            Ok(())
        }
        fn unit_open(field: &str, v: f64) -> Result<()> {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
            Ok(())
        }

        if self.corpus.path.as_os_str().is_empty() {
            return Err(Error::config("corpus.path", "must name a UTF-8 text file"));
        }
        let m = &self.model;
        positive("model.embed", m.embed)?;
        positive("model.hidden", m.hidden)?;
        positive("model.layers", m.layers)?;
        unit_open("model.dropout", m.dropout)?;
        if m.tied && m.embed != m.hidden {
            return Err(Error::config(
                "model.tied",
                format!("requires model.embed == model.hidden, got {} and {}", m.embed, m.hidden),
            ));
        }
        unit_open("sparsity", self.sparsity)?;

        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::config("train.lr", format!("must be finite and >= 0, got {}", t.lr)));
        }
        if !(t.clip.is_finite() && t.clip > 0.0) {
            return Err(Error::config("train.clip", format!("must be finite and > 0, got {}", t.clip)));
        }
        positive("train.nonmono", t.nonmono)?;
        positive("train.batch_size", t.batch_size)?;
        positive("train.bptt", t.bptt)?;
        positive("train.eval_batch_size", t.eval_batch_size)?;
        if let Some(b) = t.batches_per_epoch {
            positive("train.batches_per_epoch", b)?;
        }
        if let Some(b) = t.eval_blocks {
            positive("train.eval_blocks", b)?;
        }
        positive("train.dense_epochs", t.dense_epochs)?;

        positive("ls.k", self.ls.k)?;
        positive("ls.t", self.ls.t)?;
        if self.ls.warmup >= self.ls.t {
            return Err(Error::config(
                "ls.warmup",
                format!("must be below ls.t = {}, got {}", self.ls.t, self.ls.warmup),
            ));
        }

        let s = &self.search;
        match (s.budget_tier, s.pool_size) {
            (Some(_), Some(_)) => {
                return Err(Error::config("search.pool_size", "set either search.budget_tier or search.pool_size, not both"))
            }
            (None, None) => {
                return Err(Error::config("search.pool_size", "one of search.budget_tier or search.pool_size is required"))
            }
            (None, Some(n)) => positive("search.pool_size", n)?,
            (Some(_), None) => {}
        }
        positive("search.epochs_per_event", s.epochs_per_event)?;
        positive("search.selection_epochs", s.selection_epochs)?;
        positive("search.final_k", s.final_k)?;
        if s.extensive_epochs < s.selection_epochs {
            return Err(Error::config(
                "search.extensive_epochs",
                format!("must be >= search.selection_epochs = {}, got {}", s.selection_epochs, s.extensive_epochs),
            ));
        }
        let sp = &s.space;
        if !(sp.death_rate_min > 0.0 && sp.death_rate_min <= sp.death_rate_max && sp.death_rate_max <= 1.0) {
            return Err(Error::config(
                "search.space",
                format!("need 0 < death_rate_min <= death_rate_max <= 1, got [{}, {}]", sp.death_rate_min, sp.death_rate_max),
            ));
        }
        if !(0.0..=1.0).contains(&s.grid_death_rate) {
            return Err(Error::config(
                "search.grid_death_rate",
                format!("must lie in [0, 1], got {}", s.grid_death_rate),
            ));
        }
        if !(s.tpe.gamma > 0.0 && s.tpe.gamma < 1.0) {
            return Err(Error::config("search.tpe.gamma", format!("must lie in (0, 1), got {}", s.tpe.gamma)));
        }
        positive("search.tpe.proposals", s.tpe.proposals)?;
        if !(s.tpe.bandwidth_floor > 0.0) {
            return Err(Error::config("search.tpe.bandwidth_floor", "must be > 0"));
        }
        positive("search.workers", s.workers)?;
        Ok(())
    }

    /// Parses a JSON value, reporting unknown or mistyped keys as config
    /// errors, then validates.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(field_of(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))
    }
}

/// Best-effort field name from a serde error message.
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "<config>".to_string()
}

/// Applies `dotted.key=value` overrides. Values parse as JSON when they can
/// (numbers, booleans, `null`, quoted strings) and as plain strings
/// otherwise. Every path segment must already exist.
pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..i].join("."))))?;
            if !obj.contains_key(*part) {
                return Err(Error::config(key, "unknown key"));
            }
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), parsed.clone());
                break;
            }
            cur = obj.get_mut(*part).expect("checked above");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in PROFILES {
            RunConfig::profile(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn round_trip_through_json() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_value(c.to_value()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = RunConfig::desk().to_value();
        v["search"]["colour"] = Value::from("red");
        match RunConfig::from_value(v) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "colour"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides() {
        let mut v = RunConfig::desk().to_value();
        apply_overrides(
            &mut v,
            &[
                "search.criterion=val_loss".into(),
                "ls.t=50".into(),
                "search.pool_size=8".into(),
                "search.budget_tier=null".into(),
            ],
        )
        .unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.search.criterion, Criterion::ValLoss);
        assert_eq!(c.ls.t, 50);
        assert_eq!(c.pool_size(), 8);

        let mut v = RunConfig::desk().to_value();
        assert!(apply_overrides(&mut v, &["search.nope=1".into()]).is_err());
        assert!(apply_overrides(&mut v, &["seed".into()]).is_err());
        assert!(apply_overrides(&mut v, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>)> = vec![
            ("sparsity", Box::new(|c| c.sparsity = 1.0)),
            ("ls.warmup", Box::new(|c| c.ls.warmup = c.ls.t)),
            ("train.clip", Box::new(|c| c.train.clip = 0.0)),
            ("search.pool_size", Box::new(|c| c.search.pool_size = Some(4))),
            ("search.final_k", Box::new(|c| c.search.final_k = 0)),
            ("model.tied", Box::new(|c| {
                c.model.tied = true;
                c.model.embed = 3;
            })),
            ("search.extensive_epochs", Box::new(|c| c.search.extensive_epochs = 1)),
            ("search.tpe.gamma", Box::new(|c| c.search.tpe.gamma = 1.0)),
        ];
        for (field, mutate) in cases {
            let mut c = RunConfig::desk();
            mutate(&mut c);
            match c.validate() {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }
}
