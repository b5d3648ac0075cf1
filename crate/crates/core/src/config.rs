//! Experiment configuration: one JSON document drives data generation,
//! pretraining, training, evaluation, and ablation. Module toggles map
//! one-to-one onto the core ablation rows.

use serde::{Deserialize, Serialize};

use crate::date::DateVariant;
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::sse::EncoderVariant;
use crate::vlcm::VlcmVariant;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub sse: bool,
    pub date: bool,
    pub vlcm: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            sse: true,
            date: true,
            vlcm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Cap on validation samples per evaluation; 0 means the whole split.
    pub eval_samples: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1200,
            batch: 8,
            seed: 0,
            eval_every: 100,
            eval_samples: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            steps: 300,
            batch: 8,
            lr: 1e-3,
            seed: 7,
            temperature: 0.07,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest path (gen-data writes it, everything else reads it).
    pub manifest: String,
    /// Sample count for generation.
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: "data/manifest.json".into(),
            n: 1000,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Model config with the toggles applied: a disabled module is replaced
    /// by its pass-through routing.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model;
        if !self.toggles.sse {
            m.encoder_variant = EncoderVariant::VitOnly;
        }
        if !self.toggles.date {
            m.date.variant = DateVariant::MainOnly;
        }
        if !self.toggles.vlcm {
            m.vlcm.variant = VlcmVariant::None;
        }
        m
    }
}

/// Apply a `dotted.key=value` override onto the JSON form of a config.
/// The key must already exist (unknown keys are rejected); the value is
/// parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CoreError::Config(format!("override '{assignment}' is not key=value"))
    })?;
    let mut cursor = &mut *root;
    for segment in path.split('.') {
        cursor = cursor
            .as_object_mut()
            .and_then(|m| m.get_mut(segment))
            .ok_or_else(|| CoreError::Config(format!("unknown config key '{path}'")))?;
    }
    let new_value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    *cursor = new_value;
    Ok(())
}

/// Parse a config JSON with overrides into a validated ExperimentConfig.
pub fn load_config(body: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| CoreError::Config(format!("config parse: {e}")))?;
    // merge over defaults so partial configs work and override paths resolve
    let mut base = serde_json::to_value(ExperimentConfig::default()).expect("default config");
    merge(&mut base, &value);
    value = base;
    for assignment in overrides {
        apply_override(&mut value, assignment)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CoreError::Config(format!("config: {e}")))?;
    cfg.resolved_model().validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_route_to_pass_throughs() {
        let mut cfg = ExperimentConfig::default();
        cfg.toggles = Toggles {
            sse: false,
            date: false,
            vlcm: false,
        };
        let m = cfg.resolved_model();
        assert_eq!(m.encoder_variant, EncoderVariant::VitOnly);
        assert_eq!(m.date.variant, DateVariant::MainOnly);
        assert_eq!(m.vlcm.variant, VlcmVariant::None);
    }

    #[test]
    fn override_sets_nested_key() {
        let cfg = load_config("{}", &["train.steps=0".into(), "toggles.sse=false".into()])
            .unwrap();
        assert_eq!(cfg.train.steps, 0);
        assert!(!cfg.toggles.sse);
    }

    #[test]
    fn override_rejects_unknown_key() {
        let err = load_config("{}", &["train.nonexistent=1".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn unknown_json_field_is_rejected() {
        assert!(load_config("{\"train\": {\"stepz\": 3}}", &[]).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = load_config("{\"train\": {\"steps\": 7}}", &[]).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.data.n, 1000);
    }
}
