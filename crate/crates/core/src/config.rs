//! The run configuration file format.
//!
//! Configs are TOML with one section per subsystem (`[dataset]`, `[sampler]`,
//! `[weight]`, `[trainer]`, `[telemetry]`, `[model]`, `[eval]`). Every key has
//! a default, so an empty file is a valid reference configuration. Loading
//! resolves defaults and validates; the fully resolved config is echoed back
//! into each run directory so results are reproducible from the artifact
//! alone. Environment variables are never consulted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive_weight::{CenterMode, WeightConfig, WeightKernel};
use crate::denoiser_model::CheckpointFormat;
use crate::error::{Error, Result};
use crate::generation_eval::{DatasetSpec, DatasetVariant};
use crate::snr_domain::SamplerSpec;
use crate::trainer::{AdamParams, EvalConfig, ModelConfig, RunConfig, TelemetryConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    dataset: DatasetSection,
    #[serde(default)]
    sampler: Option<SamplerSpec>,
    #[serde(default)]
    weight: WeightSection,
    #[serde(default)]
    trainer: TrainerSection,
    #[serde(default)]
    telemetry: TelemetryConfig,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    eval: EvalConfig,
}

// deny_unknown_fields cannot be combined with the flattened variant here;
// unknown dataset keys fail on the variant's own field set instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetSection {
    #[serde(flatten)]
    variant: DatasetVariant,
    #[serde(default = "default_n_train")]
    n_train: usize,
}

fn default_n_train() -> usize {
    10_000
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            variant: DatasetVariant::GaussianIso {
                dim: 2,
                sigma_data: 0.5,
            },
            n_train: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WeightSection {
    alpha: f64,
    kernel: WeightKernel,
    center_mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    center_value: Option<f64>,
    normalize_batch_weights: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    center_ema_momentum: Option<f64>,
}

impl Default for WeightSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            kernel: WeightKernel::Rational,
            center_mode: "batch_mean".into(),
            center_value: None,
            normalize_batch_weights: false,
            center_ema_momentum: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainerSection {
    steps: u64,
    batch_size: usize,
    learning_rate: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
    seed: u64,
    sigma_data: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            steps: 6000,
            batch_size: 128,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
            sigma_data: 0.5,
        }
    }
}

fn weight_config_from_section(section: &WeightSection) -> Result<WeightConfig> {
    let center_mode = match section.center_mode.as_str() {
        "batch_mean" => {
            if section.center_value.is_some() {
                return Err(Error::Config(
                    "center_value is only valid with center_mode = \"fixed\"".into(),
                ));
            }
            CenterMode::BatchMean
        }
        "fixed" => CenterMode::FixedValue(section.center_value.ok_or_else(|| {
            Error::Config("center_mode = \"fixed\" requires center_value".into())
        })?),
        other => {
            return Err(Error::Config(format!(
                "unknown center_mode {other:?}; expected \"batch_mean\" or \"fixed\""
            )))
        }
    };
    let cfg = WeightConfig {
        alpha: section.alpha,
        kernel: section.kernel,
        center_mode,
        normalize_batch_weights: section.normalize_batch_weights,
        center_ema_momentum: section.center_ema_momentum,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn section_from_weight_config(cfg: &WeightConfig) -> WeightSection {
    let (center_mode, center_value) = match cfg.center_mode {
        CenterMode::BatchMean => ("batch_mean".to_string(), None),
        CenterMode::FixedValue(c) => ("fixed".to_string(), Some(c)),
    };
    WeightSection {
        alpha: cfg.alpha,
        kernel: cfg.kernel,
        center_mode,
        center_value,
        normalize_batch_weights: cfg.normalize_batch_weights,
        center_ema_momentum: cfg.center_ema_momentum,
    }
}

fn run_config_from_file(file: FileConfig) -> Result<RunConfig> {
    let cfg = RunConfig {
        dataset: DatasetSpec {
            variant: file.dataset.variant,
            n_train: file.dataset.n_train,
        },
        steps: file.trainer.steps,
        batch_size: file.trainer.batch_size,
        adam: AdamParams {
            learning_rate: file.trainer.learning_rate,
            beta1: file.trainer.adam_beta1,
            beta2: file.trainer.adam_beta2,
            epsilon: file.trainer.adam_epsilon,
        },
        seed: file.trainer.seed,
        sampler: file.sampler.unwrap_or_else(SamplerSpec::default_log_normal),
        weight: weight_config_from_section(&file.weight)?,
        sigma_data: file.trainer.sigma_data,
        telemetry: file.telemetry,
        eval: file.eval,
        model: file.model,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn file_from_run_config(cfg: &RunConfig) -> FileConfig {
    FileConfig {
        dataset: DatasetSection {
            variant: cfg.dataset.variant.clone(),
            n_train: cfg.dataset.n_train,
        },
        sampler: Some(cfg.sampler),
        weight: section_from_weight_config(&cfg.weight),
        trainer: TrainerSection {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.adam.learning_rate,
            adam_beta1: cfg.adam.beta1,
            adam_beta2: cfg.adam.beta2,
            adam_epsilon: cfg.adam.epsilon,
            seed: cfg.seed,
            sigma_data: cfg.sigma_data,
        },
        telemetry: cfg.telemetry.clone(),
        model: cfg.model.clone(),
        eval: cfg.eval.clone(),
    }
}

/// Parse a config from TOML text, resolving defaults and validating.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: FileConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    run_config_from_file(file)
}

/// Load a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Serialize the fully resolved config back to TOML.
pub fn resolved_config_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(&file_from_run_config(cfg))
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
}

/// Checkpoint format chosen by a config.
pub fn checkpoint_format(cfg: &RunConfig) -> CheckpointFormat {
    cfg.model.checkpoint_format
}
