//! Pipeline configuration, read from TOML.
//!
//! Every table and key is optional; missing values take the desk-scale
//! defaults below. Component seeds are not configured separately: they are
//! derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::error::{io_err, Error, Result};
use crate::generator::{GeneratorMode, GeneratorTraining, InferenceConfig};
use crate::masker::MaskerConfig;
use crate::stance::StanceTraining;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Root directory for everything a command reads or writes.
    pub out: PathBuf,
    pub paths: Paths,
    pub corpus: SynthConfig,
    pub vocab_min_count: usize,
    pub classifier: ClassifierStage,
    pub masker: MaskerStage,
    pub generator: GeneratorStage,
    pub inference: InferenceConfig,
    pub sweep: SweepConfig,
    pub augmentation: AugmentationConfig,
}

/// Subdirectories of `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierStage {
    pub embed: usize,
    pub hidden: usize,
    pub mlp: usize,
    /// Fraction of training pairs copied with a random span replaced by `★`
    /// and relabeled by the slot oracle.
    pub redaction_rate: f64,
    pub redaction_span: usize,
    pub training: StanceTraining,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        ClassifierStage {
            embed: 16,
            hidden: 16,
            mlp: 32,
            redaction_rate: 0.5,
            redaction_span: 3,
            training: StanceTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskerStage {
    pub embed: usize,
    pub hidden: usize,
    pub mask_hidden: usize,
    pub training: MaskerConfig,
}

impl Default for MaskerStage {
    fn default() -> Self {
        MaskerStage {
            embed: 16,
            hidden: 16,
            mask_hidden: 16,
            training: MaskerConfig {
                lambda: 4.0,
                epochs: 20,
                patience: 5,
                ..MaskerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorStage {
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub mode: GeneratorMode,
    pub training: GeneratorTraining,
}

impl Default for GeneratorStage {
    fn default() -> Self {
        GeneratorStage {
            embed: 16,
            hidden: 16,
            attention: 16,
            mode: GeneratorMode::TwoEncoder,
            training: GeneratorTraining {
                steps: 600,
                batch_size: 32,
                log_every: 50,
                ..GeneratorTraining::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 2.0, 8.0, 30.0, 100.0],
            epochs: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AugmentMethod {
    /// New AGREE evidence from the masker and generator.
    #[default]
    Generator,
    /// New AGREE evidence is the claim itself.
    CopyClaim,
}

impl std::str::FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "GENERATOR" => Ok(AugmentMethod::Generator),
            "COPY_CLAIM" => Ok(AugmentMethod::CopyClaim),
            _ => Err(Error::Config(format!("unknown augmentation method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub method: AugmentMethod,
    /// Probability that a DISAGREE claim of the biased corpus carries the cue.
    pub bias_prob: f64,
    /// Classifier epochs for both arms of the comparison.
    pub classifier_epochs: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            method: AugmentMethod::Generator,
            bias_prob: 0.9,
            classifier_epochs: 12,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            out: "out".into(),
            paths: Paths::default(),
            corpus: SynthConfig::default(),
            vocab_min_count: 1,
            classifier: ClassifierStage::default(),
            masker: MaskerStage::default(),
            generator: GeneratorStage::default(),
            inference: InferenceConfig::default(),
            sweep: SweepConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Model sizes from the original setup: classifier hidden 100, generator
    /// hidden 256, generator batches of 64 for 3K steps, masker up to 100
    /// epochs with patience 10.
    pub fn full_scale() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.classifier.embed = 100;
        cfg.classifier.hidden = 100;
        cfg.classifier.mlp = 100;
        cfg.masker.embed = 100;
        cfg.masker.hidden = 100;
        cfg.masker.mask_hidden = 100;
        cfg.masker.training.epochs = 100;
        cfg.masker.training.patience = 10;
        cfg.generator.embed = 100;
        cfg.generator.hidden = 256;
        cfg.generator.attention = 256;
        cfg.generator.training.steps = 3000;
        cfg.generator.training.batch_size = 64;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.masker.training.validate()?;
        self.inference.validate()?;
        if self.sweep.lambdas.is_empty() {
            return Err(Error::Config("the λ sweep needs at least one value".into()));
        }
        if !(0.0..=1.0).contains(&self.classifier.redaction_rate) {
            return Err(Error::Config("redaction_rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.augmentation.bias_prob) {
            return Err(Error::Config("bias_prob must lie in [0, 1]".into()));
        }
        let dims = [
            self.classifier.embed,
            self.classifier.hidden,
            self.classifier.mlp,
            self.masker.embed,
            self.masker.hidden,
            self.masker.mask_hidden,
            self.generator.embed,
            self.generator.hidden,
            self.generator.attention,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Seed for component `k`, derived from the top-level seed.
    pub fn seed_for(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k)
    }

    /// The corpus settings with the pipeline seed applied.
    pub fn corpus_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join(&self.paths.data)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join(&self.paths.checkpoints)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join(&self.paths.reports)
    }
}
