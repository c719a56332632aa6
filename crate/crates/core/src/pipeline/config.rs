use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentMode;
use crate::data::{ExtremeSpec, ToySpec};
use crate::error::{config, Result};
use crate::flow::FlowSpec;
use crate::nets::CriticSpec;
use crate::objectives::ContrastiveKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Erm,
    Iw,
    #[default]
    Ecrt,
    EcrtMulti,
}

impl VariantKind {
    /// Baselines train `h(e(x))` directly and skip stages 2-4.
    pub fn is_baseline(self) -> bool {
        matches!(self, Self::Erm | Self::Iw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Demix,
    Augment,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Demix, Stage::Augment, Stage::Refine];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            1..=4 => Ok(Self::ALL[n - 1]),
            _ => config(format!("stage {n} does not exist (expected 1-4)")),
        }
    }

    /// Lower-case name used for optimiser, epoch and rng keys.
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Demix => "demix",
            Self::Augment => "augment",
            Self::Refine => "refine",
        }
    }

    pub fn previous(self) -> Option<Self> {
        self.number().checked_sub(2).map(|i| Self::ALL[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Seven-class Hénon toy; `spec.counts` are per-class totals before the split.
    Toy {
        #[serde(default = "ToySpec::seven_class")]
        spec: ToySpec,
        /// Stratified train fraction; the rest is validation.
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        /// Balanced held-out test rows per class used for final metrics (0: report on validation).
        #[serde(default)]
        test_per_class: usize,
    },
    Extreme {
        #[serde(default)]
        spec: ExtremeSpec,
    },
    Mnist {
        /// Directory with the four IDX files; falls back to `ECRT_MNIST_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        minority_classes: Vec<usize>,
        majority: usize,
        minority: usize,
        validation_per_class: usize,
    },
    /// Pre-generated dumps written by `gen-data`.
    Dump { train: PathBuf, validation: PathBuf },
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Toy { spec: ToySpec::seven_class(), train_fraction: 0.8, test_per_class: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    /// Features are used as-is (the toy models).
    #[default]
    Identity,
    Mlp { hidden: Vec<usize>, output: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTraining {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Leading epochs that train only the stage's auxiliary heads. In the
    /// de-mixing stage the flow stays fixed until the critic has caught up.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Anneal the learning rate along a half cosine to zero at `epochs`.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl StageTraining {
    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs == 0 {
            return self.lr;
        }
        let progress = (epoch.saturating_sub(1)) as f64 / self.epochs as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

impl Default for StageTraining {
    fn default() -> Self {
        Self { epochs: 200, patience: 20, batch_size: 256, lr: 1e-3, warmup_epochs: 0, cosine_decay: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default)]
    pub pretrain: StageTraining,
    #[serde(default)]
    pub demix: StageTraining,
    #[serde(default)]
    pub refine: StageTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    #[serde(default)]
    pub mode: AugmentMode,
    /// Synthetic rows per minority class; defaults to the largest class count.
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default = "default_eps_sigma")]
    pub eps_sigma: f64,
    #[serde(default)]
    pub without_replacement: bool,
    /// Fresh ground-truth rows per class for oracle augmentation.
    #[serde(default = "default_oracle_pool")]
    pub oracle_pool: usize,
}

fn default_oracle_pool() -> usize {
    2000
}

fn default_eps_sigma() -> f64 {
    1e-4
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Nonparametric,
            count: None,
            eps_sigma: 1e-4,
            without_replacement: false,
            oracle_pool: 2000,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub variant: VariantKind,
    #[serde(default)]
    pub objective: ContrastiveKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_predictor_hidden")]
    pub predictor_hidden: Vec<usize>,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub critic: CriticSpec,
    /// Likelihood regularisation weight.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Augmentation strength.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Augmentation settings. `ecrt-multi` reads the default nonparametric
    /// mode as parametric sampling from its learned class priors.
    #[serde(default)]
    pub augment: AugmentSettings,
    /// Pre-train on majority classes only (requires more than two classes).
    #[serde(default = "default_true")]
    pub majority_only_pretrain: bool,
    /// Importance-weight the base loss of the refinement stage.
    #[serde(default)]
    pub weighted_refine: bool,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Kernel bandwidth for MMD diagnostics.
    #[serde(default = "default_sigma")]
    pub mmd_sigma: f64,
}

fn default_predictor_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_rho() -> f64 {
    1e-2
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_sigma() -> f64 {
    0.5
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return config(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return config(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.mmd_sigma > 0.0) {
            return config("mmd_sigma must be positive");
        }
        if !(self.augment.eps_sigma > 0.0) {
            return config("augment.eps_sigma must be positive");
        }
        if self.augment.count == Some(0) || self.augment.oracle_pool == 0 {
            return config("augment.count and augment.oracle_pool must be positive");
        }
        if self.flow.blocks == 0 || self.flow.hidden == 0 {
            return config("flow needs at least one block and a positive hidden width");
        }
        for (name, t) in [("pretrain", self.training.pretrain), ("demix", self.training.demix), ("refine", self.training.refine)] {
            if t.batch_size < 2 {
                return config(format!("training.{name}.batch_size must be at least 2"));
            }
            if !(t.lr > 0.0) {
                return config(format!("training.{name}.lr must be positive"));
            }
        }
        if let DatasetConfig::Toy { train_fraction, .. } = &self.dataset {
            if !(0.0 < *train_fraction && *train_fraction < 1.0) {
                return config("toy train_fraction must lie in (0, 1)");
            }
        }
        if let EncoderConfig::Mlp { output, .. } = &self.encoder {
            if *output == 0 {
                return config("encoder output width must be positive");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = StageTraining { epochs: 10, lr: 0.02, cosine_decay: true, ..StageTraining::default() };
        assert_eq!(s.lr_at(1), 0.02);
        assert!((s.lr_at(6) - 0.01).abs() < 1e-15);
        assert!(s.lr_at(10) > 0.0 && s.lr_at(10) < 0.001);
        assert_eq!(StageTraining::default().lr_at(7), 1e-3);
    }

    #[test]
    fn defaults_follow_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.rho, 1e-2);
        assert_eq!(c.lambda, 1e-3);
        assert_eq!(c.training.demix, StageTraining::default());
        assert_eq!(c.flow, FlowSpec { blocks: 4, hidden: 128, layers: 2 });
        assert_eq!(c.critic.embed_dim, 16);
        assert_eq!(c.mmd_sigma, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let c = ExperimentConfig { seed: 4, variant: VariantKind::EcrtMulti, ..ExperimentConfig::default() };
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"ecrt-multi\""));
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"lambda": 2.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"rho": -1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"kind": "mnist"}}"#).is_err());
    }

    #[test]
    fn stage_numbering() {
        assert_eq!(Stage::from_number(3).unwrap(), Stage::Augment);
        assert_eq!(Stage::Refine.previous(), Some(Stage::Augment));
        assert_eq!(Stage::Pretrain.previous(), None);
        assert!(Stage::from_number(0).is_err());
    }
}
