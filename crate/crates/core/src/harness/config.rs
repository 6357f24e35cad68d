use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{ModelVariantSpec, Variant};
use crate::optim::AdamConfig;
use crate::preprocess::PreprocessConfig;
use crate::volume_io::LabelMap;

/// Overrides `data_root` when set.
pub const DATA_ROOT_ENV: &str = "CDANET_DATA_ROOT";

/// Label map looked up in the data root when the config names none.
pub const LABEL_MAP_FILE: &str = "labels.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BaseCtnDttnPenalty,
            base_channels: 16,
            depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            name: "adam".into(),
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> Result<AdamConfig> {
        if !self.name.eq_ignore_ascii_case("adam") {
            return Err(Error::Config(format!("unsupported optimizer `{}` (only `adam`)", self.name)));
        }
        let cfg = AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Cases whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    /// 1 trains and validates on every case.
    pub n_folds: usize,
    /// Fold held out by `train`.
    pub fold: usize,
    pub seed: u64,
    pub augment: bool,
    /// Validate every this many epochs.
    pub validate_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            n_folds: 5,
            fold: 0,
            seed: 0,
            augment: true,
            validate_every: 1,
            max_steps: None,
        }
    }
}

/// One experiment, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    /// Falls back to `<data_root>/labels.toml`, then to the MM-WHS map.
    pub label_map: Option<PathBuf>,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            output_root: "runs".into(),
            label_map: None,
            model: ModelConfig::default(),
            preprocess: PreprocessConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML, apply `section.key=value` overrides, then validate.
    pub fn from_toml_str(s: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = s.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (key, value) in overrides {
            set_dotted(&mut doc, key, parse_value(value))?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path`. Relative paths inside the file resolve against its
    /// directory, and [`DATA_ROOT_ENV`] replaces `data_root`.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&s, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_root = base.join(&cfg.data_root);
        cfg.output_root = base.join(&cfg.output_root);
        cfg.label_map = cfg.label_map.map(|p| base.join(p));
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.data_root = root.into();
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.loss.validate()?;
        self.optimizer.adam()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || t.validate_every == 0 {
            return Err(Error::Config("epochs, batch_size and validate_every must be positive".into()));
        }
        if t.n_folds == 0 {
            return Err(Error::Config("n_folds must be at least 1".into()));
        }
        if t.fold >= t.n_folds {
            return Err(Error::Config(format!("fold {} out of range for {} folds", t.fold, t.n_folds)));
        }
        self.model_spec(1)?.validate()
    }

    pub fn resolve_label_map(&self) -> Result<LabelMap> {
        if let Some(p) = &self.label_map {
            return LabelMap::load(p);
        }
        let local = self.data_root.join(LABEL_MAP_FILE);
        if local.is_file() {
            return LabelMap::load(&local);
        }
        Ok(LabelMap::mmwhs())
    }

    /// Model spec for `n_structures` with the training seed.
    pub fn model_spec(&self, n_structures: usize) -> Result<ModelVariantSpec> {
        let spec = ModelVariantSpec {
            variant: self.model.variant,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            n_structures,
            n_seg_classes: n_structures + 1,
            input_size: self.preprocess.target_size,
            seed: self.training.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adam(&self) -> Result<AdamConfig> {
        self.optimizer.adam()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut cfg = self.clone();
        cfg.model.variant = variant;
        cfg
    }
}

/// Short digest of everything that shapes the cached targets.
pub fn target_cache_key(pre: &PreprocessConfig, labels: &LabelMap) -> String {
    let payload = serde_json::json!({
        "format": 1,
        "window": [pre.window_low, pre.window_high],
        "target_size": pre.target_size,
        "labels": labels,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let s = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let src = "[training]\nepochs = 3\n[model]\nvariant = \"base\"\n";
        let ov = vec![
            ("training.epochs".to_string(), "7".to_string()),
            ("model.variant".to_string(), "base+CBAM".to_string()),
            ("output_root".to_string(), "out/x".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str(src, &ov).unwrap();
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.model.variant, Variant::BaseCbam);
        assert_eq!(cfg.output_root, PathBuf::from("out/x"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[training]\nepoch = 3\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("[optimizer]\nlearning_rate = 0.0\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("[optimizer]\nname = \"sgd\"\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\nvariant = \"unet\"\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("[training]\nn_folds = 2\nfold = 2\n", &[]).is_err());
    }

    #[test]
    fn cache_key_tracks_target_inputs_only() {
        let map = LabelMap::mmwhs();
        let a = PreprocessConfig::default();
        let mut b = a.clone();
        b.noise_sigma = 0.5;
        assert_eq!(target_cache_key(&a, &map), target_cache_key(&b, &map));
        b.target_size = [32, 32, 32];
        assert_ne!(target_cache_key(&a, &map), target_cache_key(&b, &map));
        assert_ne!(target_cache_key(&a, &map), target_cache_key(&a, &map.truncated(3).unwrap()));
    }
}
