//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]`,
//! `[contrast]` and `[augment]` sections. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ccrm::ContrastConfig;
use crate::dataio::{AugmentPolicy, FALLBACK_TEMPLATE};
use crate::encoders::SpatialMode;
use crate::error::{CfcmlError, Result};
use crate::mgcie::GranularityMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stage-1 encoder channels `C`.
    pub base_channels: usize,
    pub spatial_mode: SpatialMode,
    /// Let unit-extent axes stop halving (micro models only).
    pub saturate: bool,
    /// Common token width `C_d`.
    pub common_dim: usize,
    pub heads: usize,
    /// `n_x`, tokens per image modality.
    pub image_tokens: usize,
    /// `n_t`, tokens for the tabular modality.
    pub tabular_tokens: usize,
    pub granularity: GranularityMode,
    pub ccrm_enabled: bool,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Sentence embeddings file; the hashing embedder is used when absent.
    pub embeddings_file: Option<PathBuf>,
    /// Template for attributes outside the standard table; `None` makes
    /// them an error.
    pub fallback_template: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 4,
            spatial_mode: SpatialMode::Volumetric,
            saturate: false,
            common_dim: 16,
            heads: 2,
            image_tokens: 16,
            tabular_tokens: 8,
            granularity: GranularityMode::Multi,
            ccrm_enabled: true,
            hidden: vec![32],
            dropout: 0.5,
            embeddings_file: None,
            fallback_template: Some(FALLBACK_TEMPLATE.to_string()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfcmlError::Config(msg));
        if self.base_channels == 0 || self.common_dim == 0 {
            return bad("base_channels and common_dim must be ≥ 1".into());
        }
        if self.heads == 0 || self.common_dim % self.heads != 0 {
            return bad(format!(
                "common_dim {} is not divisible by heads {}",
                self.common_dim, self.heads
            ));
        }
        if self.image_tokens == 0 || self.tabular_tokens == 0 {
            return bad("token counts must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Inverse-frequency class weights in the cross-entropy.
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            epochs: 50,
            warmup_epochs: 5,
            decay_factor: 0.8,
            decay_period: 5,
            batch_size: 36,
            weight_decay: 1e-4,
            seed: 7,
            class_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfcmlError::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_period == 0 || self.batch_size == 0 {
            return bad("decay_period and batch_size must be ≥ 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (or manifest path), relative to the config file.
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    /// Directory for checkpoints and logs, relative to the config file.
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub contrast: ContrastConfig,
    pub augment: AugmentPolicy,
    /// Directory the relative paths above are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CfcmlError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path)
            .map_err(|e| CfcmlError::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((Self::parse(&text, &base)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.contrast.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.resolve(&self.data.root)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.data.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("", Path::new("/tmp")).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train.lr0, 5e-4);
        assert_eq!(cfg.contrast.tau, 0.07);
        assert_eq!(cfg.data_root(), PathBuf::from("/tmp/data"));
    }

    #[test]
    fn sections_and_modes() {
        let text = r#"
[model]
granularity = "sg4"
ccrm_enabled = false
common_dim = 8
heads = 4

[train]
epochs = 3
seed = 11

[contrast]
tau = 0.1

[augment]
random_flip = 0.5
"#;
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(cfg.model.granularity, GranularityMode::Single(4));
        assert!(!cfg.model.ccrm_enabled);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.augment.random_flip, Some(0.5));
        let again = RunConfig::parse(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for text in [
            "[model]\nwidth = 3\n",
            "[bogus]\n",
            "[model]\ncommon_dim = 6\nheads = 4\n",
            "[train]\nlr0 = 0.0\n",
            "[contrast]\ntau = -1.0\n",
            "[model]\ngranularity = \"sg9\"\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text, Path::new(".")), Err(CfcmlError::Config(_))),
                "{text}"
            );
        }
    }
}
