//! Run configuration: TOML files, `section.key=value` overrides, and a
//! content hash recorded in checkpoints and manifests.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::consensus::ConsensusConfig;
use crate::detector::{DetectorConfig, OptimizerConfig, OptimizerKind};
use crate::ema::TeacherSchedule;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Single score threshold on the dynamic teacher.
    Hard,
    /// Dual-teacher consensus fusion.
    Consensus,
}

/// Which model's parameters are evaluated and written as the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultModel {
    Student,
    DynamicTeacher,
    StaticTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last); 0 never.
    pub eval_every: usize,
    pub selection_mode: SelectionMode,
    /// Score threshold used by hard selection.
    pub hard_threshold: f64,
    pub use_kl: bool,
    /// Feature distillation, entropy and contrastive terms.
    pub use_auxiliary: bool,
    pub result_model: ResultModel,
    pub schedule: TeacherSchedule,
    pub consensus: ConsensusConfig,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 8,
            seed: 0,
            eval_every: 1,
            selection_mode: SelectionMode::Consensus,
            hard_threshold: 0.6,
            use_kl: true,
            use_auxiliary: true,
            result_model: ResultModel::Student,
            schedule: TeacherSchedule::default(),
            consensus: ConsensusConfig::default(),
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 2e-4,
                ..Default::default()
            },
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return Err(Error::Config("hard_threshold must lie in (0, 1)".into()));
        }
        self.schedule.validate()?;
        self.consensus.validate()?;
        self.weights.validate()?;
        validate_optimizer(&self.optimizer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub detector: DetectorConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            epochs: 8,
            seed: 0,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 2e-3,
                ..Default::default()
            },
            detector: DetectorConfig::default(),
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.detector.validate()?;
        validate_optimizer(&self.optimizer)
    }
}

fn validate_optimizer(o: &OptimizerConfig) -> Result<()> {
    let ok = o.learning_rate > 0.0
        && o.learning_rate.is_finite()
        && (0.0..1.0).contains(&o.momentum)
        && o.weight_decay >= 0.0
        && o.decay_factor > 0.0
        && o.clip_norm >= 0.0
        && o.decay_milestones.iter().all(|m| (0.0..=1.0).contains(m));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid optimizer settings: {o:?}")))
    }
}

/// Parse a TOML config, rejecting unknown keys.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(config: &T) -> String {
    toml::to_string(config).expect("configs serialize to TOML")
}

/// Apply `section.key=value` overrides. Values are read as TOML literals,
/// falling back to a bare string (so `selection_mode=hard` works).
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, overrides: &[String]) -> Result<T> {
    let mut root = toml::Value::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Every leaf key of the default config as `(dotted.key, default)`.
pub fn config_keys<T: Serialize + Default>() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, child) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &toml::Value::try_from(T::default()).expect("serializable"), &mut out);
    out
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize to JSON");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = AdaptConfig::default();
        let text = to_toml(&cfg);
        assert_eq!(parse_config::<AdaptConfig>(&text).unwrap(), cfg);
        let o = apply_overrides(
            &cfg,
            &["selection_mode=hard".into(), "schedule.n_update=7".into(), "weights.gamma_e=0.5".into()],
        )
        .unwrap();
        assert_eq!(o.selection_mode, SelectionMode::Hard);
        assert_eq!(o.schedule.n_update, 7);
        assert_eq!(o.weights.gamma_e, 0.5);
        assert!(apply_overrides(&cfg, &["nonsense=1".into()]).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg: AdaptConfig = parse_config("epochs = 0").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(parse_config::<AdaptConfig>("bogus = 1").is_err());
    }

    #[test]
    fn keys_cover_sections() {
        let keys = config_keys::<AdaptConfig>();
        for k in ["epochs", "schedule.pi_dynamic", "consensus.boost", "weights.temperature", "augment.noise_sigma"] {
            assert!(keys.iter().any(|(name, _)| name == k), "{k}");
        }
    }
}
