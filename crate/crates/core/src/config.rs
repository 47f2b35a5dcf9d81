//! Run configuration: one JSON document with a section per module. Unknown
//! keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::critic::CriticConfig;
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::reference::StrategyConfig;
use crate::synthcorpus::CorpusConfig;

/// Per-term switches for ablations; a disabled term is neither computed nor weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub structure: bool,
    pub style: bool,
    pub background: bool,
    pub adversarial: bool,
    pub color: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            structure: true,
            style: true,
            background: true,
            adversarial: true,
            color: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Validation records held fixed for per-checkpoint probe metrics.
    pub probe_size: usize,
    pub loss_toggles: LossToggles,
}

impl StageSettings {
    fn stage1_default() -> Self {
        Self {
            weights: LossWeights {
                structure: 2.5,
                alpha: 2.5,
                beta: 1.0,
                gamma: 0.0,
                lambda: 0.0,
            },
            learning_rate: 1e-4,
            iterations: 3000,
            batch_size: 8,
            checkpoint_every: 1000,
            probe_size: 16,
            loss_toggles: LossToggles::default(),
        }
    }

    fn stage2_default() -> Self {
        Self {
            weights: LossWeights {
                structure: 4.0,
                alpha: 1.0,
                beta: 1.0,
                gamma: 2.0,
                lambda: 1.0,
            },
            ..Self::stage1_default()
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!("{name}.learning_rate must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::validation(format!("{name}.batch_size must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    None,
    Nlm,
    Bilateral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Caps the number of evaluated records per split; all when absent.
    pub max_records: Option<usize>,
    pub crop_margin: f64,
    pub sample_seed: u64,
    pub defenses: Vec<Defense>,
    pub cross_backgrounds: usize,
    pub nlm_patch: usize,
    pub nlm_window: usize,
    pub nlm_h: f64,
    pub bilateral_sigma_space: f64,
    pub bilateral_sigma_color: f64,
    pub bilateral_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_records: None,
            crop_margin: 0.1,
            sample_seed: 0,
            defenses: vec![Defense::Nlm, Defense::Bilateral],
            cross_backgrounds: 5,
            nlm_patch: 3,
            nlm_window: 7,
            nlm_h: 0.1,
            bilateral_sigma_space: 2.0,
            bilateral_sigma_color: 0.1,
            bilateral_radius: 4,
        }
    }
}

/// Missing keys take their defaults: the document is merged over the
/// serialized default configuration before strict deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    pub critic: CriticConfig,
    pub detector: DetectorConfig,
    pub strategy: StrategyConfig,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            backend: BackendConfig::default(),
            critic: CriticConfig::default(),
            detector: DetectorConfig::default(),
            strategy: StrategyConfig::default(),
            stage1: StageSettings::stage1_default(),
            stage2: StageSettings::stage2_default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        if !user.is_object() {
            return Err(Error::validation("config must be a JSON object"));
        }
        let mut merged = serde_json::to_value(Config::default())?;
        merge(&mut merged, user);
        let cfg: Config = serde_json::from_value(merged).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.strategy.validate(&self.corpus.params.scene_labels)?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        let size = self.corpus.params.image_size;
        if !size.is_multiple_of(self.backend.factor) || !(size / self.backend.factor).is_multiple_of(4) {
            return Err(Error::validation(format!(
                "image size {size} must be divisible by 4 x backend.factor ({})",
                self.backend.factor
            )));
        }
        if self.corpus.params.scene_labels.len() < 2 {
            return Err(Error::validation("at least two scene labels are required"));
        }
        if !(0.0..1.0).contains(&self.eval.crop_margin) {
            return Err(Error::validation("eval.crop_margin must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(crate::nn::config_hash(&serde_json::to_value(self)?))
    }
}

/// Recursively overlays `over` onto `base`; non-object values replace.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = Config::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(Config::from_json(r#"{"stage1": {"iterations": 5, "lr": 1}}"#).is_err());
        assert!(Config::from_json(r#"{"backend": {"factor": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = Config::from_json(r#"{"stage2": {"iterations": 7}}"#).unwrap();
        assert_eq!(c.stage2.iterations, 7);
        assert_eq!(c.stage2.weights.lambda, 1.0);
    }
}
