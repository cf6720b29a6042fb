//! Run configuration: one TOML file per command. Unknown keys are rejected
//! with the offending name and the list of valid keys in the error message.

use crate::schedule::VpSchedule;
use crate::trainer::{LangevinConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dae,
    Vae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dae => "dae",
            ModelKind::Vae => "vae",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Poly,
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Toy,
    MnistIdx,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Alg1,
    Alg2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub mapping_size: usize,
    #[serde(default = "default_mlp_widths")]
    pub mlp_widths: Vec<usize>,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_weak_channels")]
    pub weak_encoder_channels: Vec<usize>,
    #[serde(default)]
    pub embed_z: bool,
    #[serde(default)]
    pub per_block_attention: bool,
    #[serde(default = "default_scale_s")]
    pub fourier_scale_s: f64,
    #[serde(default = "default_scale_z")]
    pub fourier_scale_z: f64,
    pub decoder: DecoderKind,
    #[serde(default = "default_sigma")]
    pub decoder_sigma: f64,
    #[serde(default = "default_base_channels")]
    pub decoder_base_channels: usize,
    #[serde(default = "default_stage_channels")]
    pub decoder_stage_channels: Vec<usize>,
    #[serde(default)]
    pub decoder_self_attention: bool,
    #[serde(default = "default_mlp_widths")]
    pub decoder_mlp_widths: Vec<usize>,
    #[serde(default = "default_mlp_widths")]
    pub vae_encoder_widths: Vec<usize>,
}

fn default_mlp_widths() -> Vec<usize> {
    vec![64, 64]
}
fn default_heads() -> usize {
    4
}
fn default_weak_channels() -> Vec<usize> {
    vec![32, 64]
}
fn default_scale_s() -> f64 {
    10.0
}
fn default_scale_z() -> f64 {
    10.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_base_channels() -> usize {
    64
}
fn default_stage_channels() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub train_count: usize,
    pub eval_count: usize,
    #[serde(default = "default_one")]
    pub downsample: usize,
    #[serde(default = "default_toy_sigma")]
    pub toy_sigma: f64,
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_one() -> usize {
    1
}
fn default_toy_sigma() -> f64 {
    0.5
}
fn default_side() -> usize {
    28
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_alg")]
    pub algorithm: Algorithm,
    /// Total training cycles; when `epochs > 0` it is derived instead.
    #[serde(default)]
    pub cycles: usize,
    #[serde(default)]
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_bz")]
    pub latents_per_input: usize,
    #[serde(default = "default_pf")]
    pub pf_ode_steps: usize,
    #[serde(default = "default_heun_export")]
    pub heun_steps_export: usize,
    #[serde(default = "default_rd_gammas")]
    pub rd_gammas: Vec<f64>,
    #[serde(default = "default_export_per_class")]
    pub export_per_class: usize,
    #[serde(default = "default_rate_mc")]
    pub rate_mc_samples: usize,
    pub out_dir: PathBuf,
}

fn default_alg() -> Algorithm {
    Algorithm::Alg1
}
fn default_bz() -> usize {
    4
}
fn default_pf() -> usize {
    16
}
fn default_heun_export() -> usize {
    32
}
fn default_rd_gammas() -> Vec<f64> {
    vec![0.1, 0.3, 1.0, 3.0]
}
fn default_export_per_class() -> usize {
    100
}
fn default_rate_mc() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: VpSchedule,
    #[serde(default)]
    pub langevin: LangevinConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.cycles == 0 && self.run.epochs == 0 {
            return Err(ConfigError::Invalid("one of run.cycles or run.epochs must be positive".into()));
        }
        if self.run.batch_size == 0 {
            return Err(ConfigError::Invalid("run.batch_size must be positive".into()));
        }
        if self.dataset.train_count == 0 || self.dataset.eval_count == 0 {
            return Err(ConfigError::Invalid("dataset train/eval counts must be positive".into()));
        }
        self.schedule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.langevin.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Total training cycles: explicit, or derived from epochs.
    pub fn total_cycles(&self) -> usize {
        if self.run.epochs > 0 {
            let per_epoch = self.dataset.train_count.div_ceil(self.run.batch_size);
            self.run.epochs * per_epoch
        } else {
            self.run.cycles
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run.out_dir.join("checkpoint.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run.out_dir.join("metrics.csv")
    }

    pub fn rd_path(&self) -> PathBuf {
        self.run.out_dir.join("rd.csv")
    }

    pub fn latents_path(&self) -> PathBuf {
        self.run.out_dir.join("latents.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY_DAE: &str = r#"
seed = 42

[model]
kind = "dae"
latent_dim = 1
mapping_size = 32
mlp_widths = [64, 64]
fourier_scale_z = 1.0
decoder = "poly"
decoder_sigma = 0.5

[dataset]
kind = "toy"
train_count = 4096
eval_count = 1000

[run]
cycles = 100
batch_size = 128
latents_per_input = 1
out_dir = "out"
"#;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = RunConfig::parse(TOY_DAE).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Dae);
        assert_eq!(cfg.schedule, VpSchedule::default());
        assert_eq!(cfg.total_cycles(), 100);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_rejected_with_valid_keys_listed() {
        let bad = TOY_DAE.replace("cycles = 100", "cycles = 100\nnot_a_key = 5");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("not_a_key"), "names the offender: {err}");
        assert!(err.contains("batch_size") || err.contains("expected"), "lists valid keys: {err}");
    }

    #[test]
    fn epochs_derive_cycles() {
        let cfg = TOY_DAE.replace("cycles = 100", "epochs = 2");
        let cfg = RunConfig::parse(&cfg).unwrap();
        assert_eq!(cfg.total_cycles(), 2 * 4096usize.div_ceil(128));
    }

    #[test]
    fn zero_cycle_config_is_invalid() {
        let cfg = TOY_DAE.replace("cycles = 100", "cycles = 0");
        assert!(RunConfig::parse(&cfg).is_err());
    }
}
