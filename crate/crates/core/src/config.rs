//! Experiment configuration: one TOML file describing data, model, losses,
//! training, and evaluation. Unknown keys are rejected; individual values
//! can be overridden from the command line with `section.key=value` paths.

use crate::error::{Result, SlotError};
use crate::evalsuite::ProbeConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::scenegen::AugmentConfig;
use crate::trainer::TrainConfig;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Short name used for run directories and reports.
    pub run_id: String,
    pub seed: u64,
    /// Side length images are augmented/evaluated at.
    pub image_size: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            seed: 0,
            image_size: 64,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| SlotError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SlotError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(SlotError::Config(format!(
                "run_id {:?} must be non-empty [A-Za-z0-9_-]",
                self.run_id
            )));
        }
        self.model.validate(self.augment.output_size)?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.image_size != self.augment.output_size {
            return Err(SlotError::Config(format!(
                "image_size {} must match augment.output_size {}",
                self.image_size, self.augment.output_size
            )));
        }
        Ok(())
    }

    /// Apply `section.key=value` overrides (dotted paths into the TOML
    /// tree), re-validating the result.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree: toml::Value = toml::Value::try_from(self)
            .map_err(|e| SlotError::Config(format!("config serialize: {e}")))?;
        for ov in overrides {
            let (path, raw) = ov.split_once('=').ok_or_else(|| {
                SlotError::Config(format!("override {ov:?} is not of the form path=value"))
            })?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .map(|t| t["v"].clone())
                .or_else(|_| {
                    toml::from_str::<toml::Table>(&format!("v = {raw:?}"))
                        .map(|t| t["v"].clone())
                })
                .map_err(|e| SlotError::Config(format!("override value {raw:?}: {e}")))?;
            let parts: Vec<&str> = path.split('.').collect();
            set_path(&mut tree, &parts, value, path)?;
        }
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e| SlotError::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable short hash of the full configuration (hex). Identical configs
    /// hash identically across runs and precisions.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, full: &str) -> Result<()> {
    let table = node.as_table_mut().ok_or_else(|| {
        SlotError::Config(format!("override path {full:?}: not a table at {:?}", parts[0]))
    })?;
    if parts.len() == 1 {
        table.insert(parts[0].to_string(), value);
        Ok(())
    } else {
        let child = table
            .entry(parts[0].to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        set_path(child, &parts[1..], value, full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::AttentionVariant;
    use crate::losses::ObjectObjective;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "run_id = \"x\"\nnot_a_key = 3\n";
        let err = ExperimentConfig::from_toml_str(text);
        assert!(err.is_err());
        let text = "[model]\nbogus = true\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ExperimentConfig::default();
        let out = cfg
            .with_overrides(&[
                "train.epochs=9".into(),
                "loss.temperature=0.2".into(),
                "model.grouping.variant=\"cross\"".into(),
                "loss.objective=\"cos_sim\"".into(),
                "run_id=abc".into(),
            ])
            .unwrap();
        assert_eq!(out.train.epochs, 9);
        assert_eq!(out.loss.temperature, 0.2);
        assert_eq!(out.model.grouping.variant, AttentionVariant::Cross);
        assert_eq!(out.loss.objective, Some(ObjectObjective::CosSim));
        assert_eq!(out.run_id, "abc");
        // bad path and bad value both fail
        assert!(cfg.with_overrides(&["no.such.key=1".into()]).is_err());
        assert!(cfg.with_overrides(&["train.epochs=zero".into()]).is_err());
        assert!(cfg.with_overrides(&["oops".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = a.with_overrides(&["seed=1".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn invalid_run_id_rejected() {
        let cfg = ExperimentConfig {
            run_id: "bad id!".into(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_image_size_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["image_size=128".into()]).is_err());
    }
}
