use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, STAGES};
use crate::tensor::AdamW;

/// Which contrastive objective joins the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveMode {
    Off,
    Infonce,
    Cl,
}

impl ContrastiveMode {
    pub const ALL: [ContrastiveMode; 3] = [
        ContrastiveMode::Off,
        ContrastiveMode::Infonce,
        ContrastiveMode::Cl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContrastiveMode::Off => "off",
            ContrastiveMode::Infonce => "infonce",
            ContrastiveMode::Cl => "cl",
        }
    }
}

impl std::str::FromStr for ContrastiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ContrastiveMode::Off),
            "infonce" => Ok(ContrastiveMode::Infonce),
            "cl" => Ok(ContrastiveMode::Cl),
            other => Err(Error::Config(format!(
                "unknown contrastive mode `{other}` (off|infonce|cl)"
            ))),
        }
    }
}

/// Everything that determines a run: data, model, objective and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub contrastive_mode: ContrastiveMode,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// Global L2 bound on the gradient before each update.
    pub grad_clip: f32,
    /// Upper clamp on the averaged contrastive term.
    pub contrastive_clip: f32,
    pub temperature: f32,
    /// Label smoothing for both the segmentation cross-entropy and the CL loss.
    pub smoothing: f32,
    /// Which backbone stages contribute contrastive terms.
    pub stage_enable: [bool; STAGES],
    pub positive_cap: usize,
    pub negative_cap: usize,
    /// Random positive–negative pairs drawn per term before the hard half is kept.
    pub pair_budget: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            contrastive_mode: ContrastiveMode::Off,
            optimizer: AdamW::default(),
            batch_size: 8,
            epochs: 20,
            seeds: vec![1, 2, 3],
            grad_clip: 1.0,
            contrastive_clip: 1.0,
            temperature: 0.07,
            smoothing: 0.1,
            stage_enable: [true; STAGES],
            positive_cap: 256,
            negative_cap: 256,
            pair_budget: 128,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.data.scene.image_side != self.model.image_side {
            return bad(format!(
                "data.scene.image_side {} differs from model.image_side {}",
                self.data.scene.image_side, self.model.image_side
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if !(self.grad_clip > 0.0) || !(self.contrastive_clip > 0.0) {
            return bad("grad_clip and contrastive_clip must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if !(self.optimizer.lr >= 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return bad("optimizer.lr and optimizer.weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.optimizer.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("optimizer.betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.positive_cap == 0 || self.negative_cap == 0 {
            return bad("positive_cap and negative_cap must be positive".into());
        }
        Ok(())
    }

    /// Parses a JSON config; absent fields take their defaults, unknown ones fail.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides addressed by dotted paths such as
    /// `model.mixer=windowed-attention` or `optimizer.lr=1e-3`.
    ///
    /// The value is read as JSON when it parses, otherwise as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let value =
                serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key `{here}`")))?;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MixerKind;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optimizer.lr, 8e-5);
        assert_eq!(
            (c.grad_clip, c.contrastive_clip, c.smoothing),
            (1.0, 1.0, 0.1)
        );
        assert_eq!(
            (c.batch_size, c.epochs, c.seeds.clone()),
            (8, 20, vec![1, 2, 3])
        );
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = ExperimentConfig::from_json(
            r#"{"epochs": 3, "model": {"mixer": "windowed-attention"}}"#,
        )
        .unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model.mixer, MixerKind::WindowedAttention);
        assert_eq!(partial.batch_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epoch": 3}"#).is_err());
        let c = ExperimentConfig::default();
        let err = c.with_overrides(&["model.depth=3"]).unwrap_err();
        assert!(err.to_string().contains("model.depth"));
        assert!(err.is_validation());
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "optimizer.lr=0.001",
                "model.mixer=windowed-attention",
                "contrastive_mode=cl",
                "stage_enable.0=false",
                "seeds=[4]",
            ])
            .unwrap();
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.model.mixer, MixerKind::WindowedAttention);
        assert_eq!(c.contrastive_mode, ContrastiveMode::Cl);
        assert_eq!(c.stage_enable, [false, true, true, true]);
        assert_eq!(c.seeds, vec![4]);
    }

    #[test]
    fn validation_failures() {
        let c = ExperimentConfig::default()
            .with_overrides(&["data.scene.car_size=[1,5]"])
            .unwrap();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("finest patch"));
        let c = ExperimentConfig::default()
            .with_overrides(&["seeds=[]"])
            .unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::default()
            .with_overrides(&["model.image_side=96"])
            .unwrap();
        assert!(c.validate().is_err());
    }
}
