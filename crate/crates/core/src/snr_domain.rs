//! Noise-scale / log-SNR coordinates and noise-level sampling distributions.
//!
//! The log-SNR of a noise scale sigma is `lambda = log(sigma_data^2 / sigma^2)`,
//! a strictly decreasing function of sigma. Sampling distributions over sigma
//! (log-uniform or log-normal) induce distributions over lambda through this
//! change of variables; both densities are evaluable so that histogram checks
//! and importance ratios are possible.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A positive, finite noise scale (standard deviation of added Gaussian noise).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseScale(f64);

impl NoiseScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!(
                "noise scale must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self(sigma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A finite log signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogSnr(f64);

impl LogSnr {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Domain(format!(
                "log-SNR must be finite, got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Noise-level sampling distribution with an evaluable density.
///
/// `LogUniform` draws `ln sigma` uniformly on `[ln sigma_min, ln sigma_max]`;
/// `LogNormal` draws `ln sigma ~ Normal(p_mean, p_std^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "lowercase")]
pub enum SamplerSpec {
    LogUniform { sigma_min: f64, sigma_max: f64 },
    LogNormal { p_mean: f64, p_std: f64 },
}

impl SamplerSpec {
    /// Log-normal defaults follow the EDM convention; the strategy itself is
    /// the primary baseline, its parameters are a config-level assumption.
    pub fn default_log_normal() -> Self {
        SamplerSpec::LogNormal {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }

    /// Log-uniform over the EDM sigma range.
    pub fn default_log_uniform() -> Self {
        SamplerSpec::LogUniform {
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplerSpec::LogUniform {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min.is_finite() && sigma_max.is_finite() && 0.0 < sigma_min) {
                    return Err(Error::Config(format!(
                        "loguniform sampler needs 0 < sigma_min, finite bounds; \
                         got sigma_min = {sigma_min}, sigma_max = {sigma_max}"
                    )));
                }
                if sigma_min >= sigma_max {
                    return Err(Error::Config(format!(
                        "loguniform sampler needs sigma_min < sigma_max; \
                         got {sigma_min} >= {sigma_max}"
                    )));
                }
                Ok(())
            }
            SamplerSpec::LogNormal { p_mean, p_std } => {
                if !(p_mean.is_finite() && p_std.is_finite() && p_std > 0.0) {
                    return Err(Error::Config(format!(
                        "lognormal sampler needs finite p_mean and p_std > 0; \
                         got p_mean = {p_mean}, p_std = {p_std}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One sampled noise level: the unit flowing through a training step.
#[derive(Debug, Clone, Copy)]
pub struct NoiseDraw {
    pub sigma: NoiseScale,
    pub lambda: LogSnr,
    /// Sampler density in lambda coordinates, evaluated at this draw.
    pub density: f64,
}

/// Map a noise scale to its log-SNR: `lambda = log(sigma_data^2 / sigma^2)`.
///
/// Strictly decreasing in sigma.
pub fn sigma_to_logsnr(sigma: NoiseScale, sigma_data: f64) -> Result<LogSnr> {
    check_sigma_data(sigma_data)?;
    LogSnr::new(2.0 * (sigma_data.ln() - sigma.get().ln()))
}

/// Inverse map: `sigma = sigma_data * exp(-lambda / 2)`.
pub fn logsnr_to_sigma(lambda: LogSnr, sigma_data: f64) -> Result<NoiseScale> {
    check_sigma_data(sigma_data)?;
    NoiseScale::new(sigma_data * (-lambda.get() / 2.0).exp())
}

/// Draw a noise scale from the sampling distribution. Deterministic given
/// the state of `rng`.
pub fn sample_noise_scale<R: Rng>(spec: &SamplerSpec, rng: &mut R) -> NoiseScale {
    let ln_sigma = match *spec {
        SamplerSpec::LogUniform {
            sigma_min,
            sigma_max,
        } => rng.random_range(sigma_min.ln()..sigma_max.ln()),
        SamplerSpec::LogNormal { p_mean, p_std } => {
            let normal = Normal::new(p_mean, p_std).expect("validated spec");
            normal.sample(rng)
        }
    };
    NoiseScale(ln_sigma.exp())
}

/// Density of lambda induced by the sampler's density over sigma.
///
/// Under `lambda = log(sigma_data^2 / sigma^2)` the Jacobian is
/// `|d sigma / d lambda| = sigma / 2`, so `p(lambda) = p(sigma(lambda)) * sigma(lambda) / 2`.
/// Outside a log-uniform support the density is 0, not an error.
pub fn density_logsnr(spec: &SamplerSpec, lambda: LogSnr, sigma_data: f64) -> Result<f64> {
    check_sigma_data(sigma_data)?;
    let lam = lambda.get();
    match *spec {
        SamplerSpec::LogUniform {
            sigma_min,
            sigma_max,
        } => {
            // ln sigma uniform implies lambda uniform with density 1/(2 * (ln smax - ln smin)).
            let lam_lo = 2.0 * (sigma_data.ln() - sigma_max.ln());
            let lam_hi = 2.0 * (sigma_data.ln() - sigma_min.ln());
            if lam < lam_lo || lam > lam_hi {
                Ok(0.0)
            } else {
                Ok(0.5 / (sigma_max.ln() - sigma_min.ln()))
            }
        }
        SamplerSpec::LogNormal { p_mean, p_std } => {
            // lambda = log sigma_data^2 - 2 ln sigma is Gaussian with
            // mean log(sigma_data^2) - 2 p_mean and std 2 p_std.
            let mean = 2.0 * sigma_data.ln() - 2.0 * p_mean;
            let std = 2.0 * p_std;
            let z = (lam - mean) / std;
            Ok((-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt()))
        }
    }
}

/// Draw a noise level together with its log-SNR and sampler density.
pub fn draw_noise_level<R: Rng>(
    spec: &SamplerSpec,
    sigma_data: f64,
    rng: &mut R,
) -> Result<NoiseDraw> {
    let sigma = sample_noise_scale(spec, rng);
    let lambda = sigma_to_logsnr(sigma, sigma_data)?;
    let density = density_logsnr(spec, lambda, sigma_data)?;
    Ok(NoiseDraw {
        sigma,
        lambda,
        density,
    })
}

pub(crate) fn check_sigma_data(sigma_data: f64) -> Result<()> {
    if !(sigma_data.is_finite() && sigma_data > 0.0) {
        return Err(Error::Domain(format!(
            "sigma_data must be positive and finite, got {sigma_data}"
        )));
    }
    Ok(())
}
