use std::fs;
use std::path::{Path, PathBuf};

use difflab::data::DatasetSpec;
use difflab::denoiser::{Activation, DenoiserConfig};
use difflab::experiment::{CompareConfig, EvalConfig};
use difflab::losses::LossWeights;
use difflab::schedule::{NoiseSchedule, ScheduleSpec};
use difflab::training::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_embed() -> usize {
    32
}

fn default_activation() -> Activation {
    Activation::Swish
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            time_embed_dim: default_embed(),
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub log_interval: usize,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

fn default_batch() -> usize {
    64
}

fn default_steps() -> usize {
    20_000
}

fn default_lr() -> f64 {
    2e-4
}

fn default_interval() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "default_target")]
    pub target_steps: usize,
}

fn default_target() -> usize {
    2
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            target_steps: default_target(),
        }
    }
}

/// One run, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub distill: DistillSection,
}

pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub path: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
        let config = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(LoadedConfig {
            config,
            sha256: hex(&Sha256::digest(&bytes)),
            path: path.to_path_buf(),
        })
    }

    /// Everything is checked before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: difflab::Error| CliError::Usage(format!("[{name}] {e}"));
        self.dataset.validate().map_err(|e| field("dataset", e))?;
        NoiseSchedule::build(&self.schedule).map_err(|e| field("schedule", e))?;
        self.denoiser_config().validate().map_err(|e| field("denoiser", e))?;
        self.eval.validate().map_err(|e| field("eval", e))?;
        if self.compare.steps.is_empty() || self.compare.steps.contains(&0) {
            return Err(CliError::Usage("[compare] steps must be a nonempty list of positive counts".into()));
        }
        if self.distill.target_steps == 0 {
            return Err(CliError::Usage("[distill] target_steps must be >= 1".into()));
        }
        let mut train = self.train_config();
        if train.mode == TrainMode::Distill && train.teacher.is_none() {
            // The teacher may come from --checkpoint; validate the rest.
            train.teacher = Some(PathBuf::from("-"));
        }
        train.validate().map_err(|e| field("train", e))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            input_dim: self.dataset.dim(),
            condition_dim: 0,
            hidden_dims: self.denoiser.hidden_dims.clone(),
            time_embed_dim: self.denoiser.time_embed_dim,
            activation: self.denoiser.activation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            schedule: self.schedule.clone(),
            denoiser: self.denoiser_config(),
            dataset: self.dataset.clone(),
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            weights: t.weights,
            seed: t.seed,
            log_interval: t.log_interval,
            checkpoint_interval: t.checkpoint_interval,
            teacher: t.teacher.clone(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "gaussian-mixture-2d"
modes = 8
radius = 2.0
std = 0.05
samples = 512
seed = 1

[schedule]
kind = "alphabar-cosine"
T = 4
params = { s = 0.008 }

[train]
mode = "generator"
steps = 10
"#;

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(&path).unwrap().config;
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
        assert!(seen >= 3);
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.compare.steps, vec![2, 4, 8, 16, 32, 64]);
        assert_eq!(cfg.denoiser_config().input_dim, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("steps = 10", "steps = 10\nwarmup = 3");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("warmup"), "{err}");
        let text = MINIMAL.replace("std = 0.05", "std = 0.05\ncolour = 1");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn invalid_values_name_their_section() {
        let text = MINIMAL.replace("steps = 10", "steps = 10\nbatch_size = 0");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("[train]") && err.contains("batch_size"), "{err}");
        let text = MINIMAL.replace("T = 4", "T = 0");
        assert!(RunConfig::parse(&text).unwrap_err().to_string().contains("[schedule]"));
    }
}
