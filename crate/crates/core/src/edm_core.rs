//! EDM preconditioning: coefficients, the wrapped denoiser, and the loss weight.
//!
//! For a noise scale sigma and data scale sigma_data:
//!
//! ```text
//! c_skip = sigma_data^2 / (sigma^2 + sigma_data^2)
//! c_out  = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2)
//! c_in   = 1 / sqrt(sigma^2 + sigma_data^2)
//! w_edm  = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2
//! ```
//!
//! The wrapped denoiser is `D(x_tilde, sigma) = c_skip * x_tilde + c_out * r`
//! where `r` is the raw network output at input `c_in * x_tilde`, and the
//! per-sample loss is `w_edm * ||D - x||^2`. The identity `w_edm * c_out^2 = 1`
//! holds for every (sigma, sigma_data).

use crate::error::{Error, Result};
use crate::snr_domain::{check_sigma_data, NoiseScale};

/// The four EDM coefficients for one noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionSet {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub w_edm: f64,
}

/// A clean sample, its noise draw, and the corrupted sample `x + sigma * eps`.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub sigma: NoiseScale,
}

impl NoisySample {
    pub fn new(x: Vec<f64>, eps: Vec<f64>, sigma: NoiseScale) -> Result<Self> {
        if x.len() != eps.len() {
            return Err(Error::Contract(format!(
                "x has dimension {} but eps has dimension {}",
                x.len(),
                eps.len()
            )));
        }
        let s = sigma.get();
        let x_tilde = x.iter().zip(&eps).map(|(xi, ei)| xi + s * ei).collect();
        Ok(Self {
            x,
            eps,
            x_tilde,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// A raw denoising network `r = f(x_in, c_noise)`.
///
/// `x_in` is the preconditioned input `c_in * x_tilde`; `c_noise` is the
/// noise-conditioning value fed to the network's noise embedding.
pub trait RawDenoiser {
    fn eval(&self, x_in: &[f64], c_noise: f64) -> Vec<f64>;
}

impl<F> RawDenoiser for F
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn eval(&self, x_in: &[f64], c_noise: f64) -> Vec<f64> {
        self(x_in, c_noise)
    }
}

/// Compute the EDM coefficients for one noise scale.
pub fn precondition(sigma: NoiseScale, sigma_data: f64) -> Result<PreconditionSet> {
    check_sigma_data(sigma_data)?;
    let s2 = sigma.get() * sigma.get();
    let d2 = sigma_data * sigma_data;
    let sum = s2 + d2;
    Ok(PreconditionSet {
        c_skip: d2 / sum,
        c_out: sigma.get() * sigma_data / sum.sqrt(),
        c_in: 1.0 / sum.sqrt(),
        w_edm: sum / (s2 * d2),
    })
}

/// Noise-conditioning value fed to the raw network: `ln(sigma) / 4`.
pub fn noise_conditioning(sigma: NoiseScale) -> f64 {
    sigma.get().ln() / 4.0
}

/// Evaluate the wrapped denoiser `D = c_skip * x_tilde + c_out * r`.
pub fn denoise(
    model: &impl RawDenoiser,
    noisy: &NoisySample,
    coeffs: &PreconditionSet,
) -> Result<Vec<f64>> {
    let x_in: Vec<f64> = noisy.x_tilde.iter().map(|v| coeffs.c_in * v).collect();
    let r = model.eval(&x_in, noise_conditioning(noisy.sigma));
    if r.len() != noisy.dim() {
        return Err(Error::Contract(format!(
            "model returned dimension {} for input dimension {}",
            r.len(),
            noisy.dim()
        )));
    }
    Ok(noisy
        .x_tilde
        .iter()
        .zip(&r)
        .map(|(xt, ri)| coeffs.c_skip * xt + coeffs.c_out * ri)
        .collect())
}

/// EDM-weighted squared reconstruction error `w_edm * ||denoised - x||^2`.
///
/// The adaptive log-SNR factor is applied separately by the weighting module.
pub fn per_sample_edm_loss(denoised: &[f64], x: &[f64], coeffs: &PreconditionSet) -> Result<f64> {
    if denoised.len() != x.len() {
        return Err(Error::Contract(format!(
            "denoised has dimension {} but x has dimension {}",
            denoised.len(),
            x.len()
        )));
    }
    let sq: f64 = denoised
        .iter()
        .zip(x)
        .map(|(d, xi)| (d - xi) * (d - xi))
        .sum();
    Ok(coeffs.w_edm * sq)
}
