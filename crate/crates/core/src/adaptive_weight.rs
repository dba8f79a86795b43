//! The adaptive log-SNR weight and its application to per-sample losses.
//!
//! Two published kernel forms are kept side by side:
//!
//! ```text
//! exponential: w = exp(-alpha * (lambda - mu)^2)
//! rational:    w = 1 / (1 + alpha * (lambda - mu)^2)
//! ```
//!
//! Both peak at 1 when lambda equals the center mu, decay symmetrically with
//! distance, and reduce to the unweighted baseline at alpha = 0. The rational
//! form is the training default. The center is normally the mini-batch mean
//! of log-SNR values; a fixed center and an optional EMA of the batch mean
//! exist behind config for ablations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snr_domain::LogSnr;

/// Shape of the adaptive weight as a function of distance from the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKernel {
    Exponential,
    Rational,
}

impl WeightKernel {
    pub fn name(self) -> &'static str {
        match self {
            WeightKernel::Exponential => "exponential",
            WeightKernel::Rational => "rational",
        }
    }
}

/// Where the kernel is centered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterMode {
    /// Arithmetic mean of the current mini-batch's log-SNR values.
    BatchMean,
    /// A fixed center, for ablations.
    FixedValue(f64),
}

/// Full weighting configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    /// Reweighting strength; 0 disables reweighting entirely.
    pub alpha: f64,
    pub kernel: WeightKernel,
    pub center_mode: CenterMode,
    /// Rescale the batch's weights to mean 1 (off by default; studies the
    /// effective-learning-rate confound).
    pub normalize_batch_weights: bool,
    /// Momentum for an EMA of the batch center across steps (off by default).
    pub center_ema_momentum: Option<f64>,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            kernel: WeightKernel::Rational,
            center_mode: CenterMode::BatchMean,
            normalize_batch_weights: false,
            center_ema_momentum: None,
        }
    }
}

impl WeightConfig {
    /// The unweighted EDM baseline: alpha = 0 makes every weight exactly 1.
    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(m) = self.center_ema_momentum {
            if !(m.is_finite() && (0.0..1.0).contains(&m)) {
                return Err(Error::Config(format!(
                    "center_ema_momentum must lie in [0, 1), got {m}"
                )));
            }
        }
        if let CenterMode::FixedValue(c) = self.center_mode {
            if !c.is_finite() {
                return Err(Error::Config(format!(
                    "fixed center must be finite, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// A batch of log-SNR values together with its resolved kernel center.
#[derive(Debug, Clone)]
pub struct BatchLambdas {
    lambdas: Vec<LogSnr>,
    center: f64,
}

impl BatchLambdas {
    /// Resolve the center for `lambdas` under the config's center mode.
    pub fn new(lambdas: Vec<LogSnr>, cfg: &WeightConfig) -> Result<Self> {
        let center = match cfg.center_mode {
            CenterMode::BatchMean => batch_center(&lambdas)?,
            CenterMode::FixedValue(c) => c,
        };
        Ok(Self { lambdas, center })
    }

    pub fn lambdas(&self) -> &[LogSnr] {
        &self.lambdas
    }

    pub fn center(&self) -> f64 {
        self.center
    }
}

/// Arithmetic mean of a nonempty batch of log-SNR values.
pub fn batch_center(lambdas: &[LogSnr]) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(Error::Contract(
            "batch center of an empty lambda sequence".into(),
        ));
    }
    Ok(lambdas.iter().map(|l| l.get()).sum::<f64>() / lambdas.len() as f64)
}

/// Evaluate the adaptive weight at one log-SNR value. Always in (0, 1];
/// clamped at the smallest positive normal where the kernel underflows.
pub fn weight(lambda: LogSnr, center: f64, cfg: &WeightConfig) -> f64 {
    let d = lambda.get() - center;
    let u = cfg.alpha * d * d;
    let w = match cfg.kernel {
        WeightKernel::Exponential => (-u).exp(),
        WeightKernel::Rational => 1.0 / (1.0 + u),
    };
    w.max(f64::MIN_POSITIVE)
}

/// Multiply per-sample losses by the adaptive weight.
///
/// The center is the batch mean under `BatchMean`, so a single-sample batch
/// is always unweighted. With `alpha = 0` the output equals the input
/// exactly; weights never increase a loss unless batch normalization is on.
pub fn apply_weights(
    per_sample_losses: &[f64],
    lambdas: &[LogSnr],
    cfg: &WeightConfig,
) -> Result<Vec<f64>> {
    if per_sample_losses.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} losses but {} lambdas",
            per_sample_losses.len(),
            lambdas.len()
        )));
    }
    let batch = BatchLambdas::new(lambdas.to_vec(), cfg)?;
    let weights = batch_weights(&batch, cfg);
    Ok(per_sample_losses
        .iter()
        .zip(&weights)
        .map(|(l, w)| l * w)
        .collect())
}

/// Weights for every sample in the batch, with optional mean-1 normalization.
pub fn batch_weights(batch: &BatchLambdas, cfg: &WeightConfig) -> Vec<f64> {
    let mut weights: Vec<f64> = batch
        .lambdas()
        .iter()
        .map(|&l| weight(l, batch.center(), cfg))
        .collect();
    if cfg.normalize_batch_weights {
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        for w in &mut weights {
            *w /= mean;
        }
    }
    weights
}
