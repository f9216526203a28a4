//! Experiment configuration file.
//!
//! ```toml
//! [dataset]
//! seed = 0
//! pair_scaling = 0.01
//!
//! [trainer]
//! epochs = 20
//! batch_size = 64
//!
//! [loss]
//! kind = "mixface"
//! epsilon = 1e-22      # or s1/s2, not both
//! margin = 0.25
//!
//! [output]
//! dir = "runs"
//! ```
//!
//! Every key is optional; missing keys take the desk defaults.

use std::fs;
use std::path::{Path, PathBuf};

use mixlab::losses::{LossKind, MarginConfig};
use mixlab::synth::{ConditionEffects, SynthConfig};
use mixlab::trainer::{SamplerKind, ScaleSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub trainer: TrainerSection,
    pub loss: LossSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_identities: usize,
    pub test_identities: usize,
    pub input_dim: usize,
    pub samples_per_identity: usize,
    pub noise: f64,
    /// Fraction of the full-size Q1..Q4 pair counts.
    pub pair_scaling: f64,
    pub effects: ConditionEffects,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            seed: s.seed,
            train_identities: s.train_identities,
            test_identities: s.test_identities,
            input_dim: s.input_dim,
            samples_per_identity: s.samples_per_identity,
            noise: s.noise,
            pair_scaling: 0.01,
            effects: s.effects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `uniform`, `positive_pair`, or `auto`.
    pub sampler: String,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            sampler: "auto".into(),
            seed: t.seed,
            hidden_dim: t.hidden_dim,
            embedding_dim: t.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: String,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub margin: Option<f64>,
    pub epsilon: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossKind::ArcFace.name().into(),
            s1: None,
            s2: None,
            margin: None,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.dataset;
        SynthConfig {
            train_identities: d.train_identities,
            test_identities: d.test_identities,
            input_dim: d.input_dim,
            noise: d.noise,
            samples_per_identity: d.samples_per_identity,
            seed: d.seed,
            effects: d.effects,
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output.dir.join("dataset")
    }

    pub fn loss_kind(&self) -> Result<LossKind, CliError> {
        self.loss.kind.parse().map_err(CliError::from)
    }

    pub fn scale(&self) -> Result<ScaleSpec, CliError> {
        let l = &self.loss;
        let defaults = MarginConfig::default();
        let m = l.margin.unwrap_or(defaults.m);
        match (l.epsilon, l.s1.is_some() || l.s2.is_some()) {
            (Some(_), true) => Err(CliError::Usage("give either epsilon or s1/s2, not both".into())),
            (Some(epsilon), false) => Ok(ScaleSpec::Unified { epsilon, m }),
            (None, _) => Ok(ScaleSpec::Fixed(MarginConfig {
                s1: l.s1.unwrap_or(defaults.s1),
                s2: l.s2.unwrap_or(defaults.s2),
                m,
            })),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.trainer;
        let sampler = match t.sampler.as_str() {
            "auto" | "" => None,
            s => Some(s.parse::<SamplerKind>()?),
        };
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            loss: self.loss_kind()?,
            scale: self.scale()?,
            sampler,
            seed: t.seed,
            hidden_dim: t.hidden_dim,
            embedding_dim: t.embedding_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let t = cfg.train_config().unwrap();
        assert_eq!(t, TrainConfig::desk());
        assert_eq!(cfg.synth(), SynthConfig::default());
    }

    #[test]
    fn epsilon_and_scales_are_exclusive() {
        let cfg: ExperimentConfig =
            toml::from_str("[loss]\nkind = \"mixface\"\nepsilon = 1e-2\ns1 = 10.0\n").unwrap();
        assert!(matches!(cfg.scale(), Err(CliError::Usage(_))));
        let cfg: ExperimentConfig =
            toml::from_str("[loss]\nkind = \"mixface\"\nepsilon = 1e-2\nmargin = 0.3\n").unwrap();
        assert_eq!(
            cfg.scale().unwrap(),
            ScaleSpec::Unified {
                epsilon: 1e-2,
                m: 0.3
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[trainer]\nepoch = 3\n").is_err());
    }

    #[test]
    fn sampler_names() {
        let cfg: ExperimentConfig = toml::from_str("[trainer]\nsampler = \"uniform\"\n").unwrap();
        assert_eq!(cfg.train_config().unwrap().sampler, Some(SamplerKind::Uniform));
        let cfg: ExperimentConfig = toml::from_str("[trainer]\nsampler = \"bogus\"\n").unwrap();
        assert!(cfg.train_config().is_err());
    }
}
