//! Synthetic datasets, deterministic ODE sampling, two-sample distribution
//! metrics, and the multi-seed ablation runner.
//!
//! Generation integrates the probability-flow ODE `dx/dsigma = (x - D(x, sigma)) / sigma`
//! from `sigma_max` down to zero with Heun's second-order corrector (plain
//! Euler on the final step), over a rho-warped noise schedule. Sample quality
//! is scored with energy distance and sliced Wasserstein-1 against held-out
//! reference samples; both are desk-scale stand-ins for FID.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive_weight::WeightKernel;
use crate::denoiser_model::MlpDenoiser;
use crate::error::{Error, Result};
use crate::trainer::{run_training, RunConfig, RunOutput};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Families of synthetic training distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetVariant {
    /// Zero-mean isotropic Gaussian with per-coordinate std `sigma_data`.
    GaussianIso { dim: usize, sigma_data: f64 },
    /// Equal-weight Gaussian mixture with shared isotropic component std.
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        component_std: f64,
    },
    /// Two interleaving half circles with Gaussian jitter, centered.
    TwoMoons { noise_std: f64 },
    /// Uniform mass on the black cells of a `cells x cells` board over [-2, 2]^2.
    Checkerboard { cells: usize },
}

impl DatasetVariant {
    pub fn dim(&self) -> usize {
        match self {
            DatasetVariant::GaussianIso { dim, .. } => *dim,
            DatasetVariant::GaussianMixture { centers, .. } => {
                centers.first().map_or(0, |c| c.len())
            }
            DatasetVariant::TwoMoons { .. } | DatasetVariant::Checkerboard { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetVariant::GaussianIso { dim, sigma_data } => {
                if *dim == 0 {
                    return Err(Error::Config("gaussian_iso needs dim >= 1".into()));
                }
                if !(*sigma_data > 0.0 && sigma_data.is_finite()) {
                    return Err(Error::Config(format!(
                        "gaussian_iso needs sigma_data > 0, got {sigma_data}"
                    )));
                }
            }
            DatasetVariant::GaussianMixture {
                centers,
                component_std,
            } => {
                if centers.is_empty() {
                    return Err(Error::Config("gaussian_mixture needs >= 1 center".into()));
                }
                let dim = centers[0].len();
                if dim == 0 || centers.iter().any(|c| c.len() != dim) {
                    return Err(Error::Config(
                        "gaussian_mixture centers must share one nonzero dimension".into(),
                    ));
                }
                if !(*component_std > 0.0 && component_std.is_finite()) {
                    return Err(Error::Config(format!(
                        "gaussian_mixture needs component_std > 0, got {component_std}"
                    )));
                }
            }
            DatasetVariant::TwoMoons { noise_std } => {
                if !(*noise_std > 0.0 && noise_std.is_finite()) {
                    return Err(Error::Config(format!(
                        "two_moons needs noise_std > 0, got {noise_std}"
                    )));
                }
            }
            DatasetVariant::Checkerboard { cells } => {
                if *cells < 2 {
                    return Err(Error::Config(format!(
                        "checkerboard needs cells >= 2, got {cells}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A dataset variant plus the number of training samples to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub variant: DatasetVariant,
    pub n_train: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be >= 1".into()));
        }
        self.variant.validate()
    }
}

/// Draw `n` samples from the variant; rows are samples.
pub fn generate_samples<R: Rng>(variant: &DatasetVariant, n: usize, rng: &mut R) -> Array2<f64> {
    let dim = variant.dim();
    let mut data = Array2::zeros((n, dim));
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    match variant {
        DatasetVariant::GaussianIso { sigma_data, .. } => {
            for mut row in data.outer_iter_mut() {
                for v in row.iter_mut() {
                    *v = sigma_data * standard.sample(rng);
                }
            }
        }
        DatasetVariant::GaussianMixture {
            centers,
            component_std,
        } => {
            for mut row in data.outer_iter_mut() {
                let c = &centers[rng.random_range(0..centers.len())];
                for (v, &mu) in row.iter_mut().zip(c) {
                    *v = mu + component_std * standard.sample(rng);
                }
            }
        }
        DatasetVariant::TwoMoons { noise_std } => {
            for mut row in data.outer_iter_mut() {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if rng.random_range(0..2u8) == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                row[0] = x - 0.5 + noise_std * standard.sample(rng);
                row[1] = y - 0.25 + noise_std * standard.sample(rng);
            }
        }
        DatasetVariant::Checkerboard { cells } => {
            let cell_w = 4.0 / *cells as f64;
            for mut row in data.outer_iter_mut() {
                // Rejection sampling over cells: accept (i + j) even.
                let (i, j) = loop {
                    let i = rng.random_range(0..*cells);
                    let j = rng.random_range(0..*cells);
                    if (i + j) % 2 == 0 {
                        break (i, j);
                    }
                };
                let x0 = -2.0 + i as f64 * cell_w;
                let y0 = -2.0 + j as f64 * cell_w;
                row[0] = x0 + rng.random_range(0.0..cell_w);
                row[1] = y0 + rng.random_range(0.0..cell_w);
            }
        }
    }
    data
}

/// Generate the training set for a spec.
pub fn generate_dataset<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Array2<f64> {
    generate_samples(&spec.variant, spec.n_train, rng)
}

// ---------------------------------------------------------------------------
// Sampling schedule and ODE sampler
// ---------------------------------------------------------------------------

/// Rho-warped noise schedule from `sigma_max` down to `sigma_min`, with a
/// final step to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub n_steps: usize,
    pub rho: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            sigma_max: 80.0,
            sigma_min: 0.002,
            n_steps: 40,
            rho: 7.0,
        }
    }
}

impl SigmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(Error::Config(format!(
                "schedule needs sigma_max > sigma_min > 0, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs rho > 0, got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// The integration grid: `n_steps` strictly decreasing sigmas followed
    /// by the terminal zero. Empty for a zero-step schedule.
    pub fn sigmas(&self) -> Vec<f64> {
        if self.n_steps == 0 {
            return Vec::new();
        }
        let inv = 1.0 / self.rho;
        let top = self.sigma_max.powf(inv);
        let bottom = self.sigma_min.powf(inv);
        let mut sigmas: Vec<f64> = (0..self.n_steps)
            .map(|i| {
                let t = if self.n_steps == 1 {
                    0.0
                } else {
                    i as f64 / (self.n_steps - 1) as f64
                };
                (top + t * (bottom - top)).powf(self.rho)
            })
            .collect();
        sigmas.push(0.0);
        sigmas
    }
}

/// A full denoiser `D(x, sigma)` evaluated on batches; what the ODE needs.
pub trait SampleDenoiser {
    fn denoise_batch(&self, x: &Array2<f64>, sigma: f64) -> Array2<f64>;
}

/// The trained MLP wrapped with its EDM preconditioning.
pub struct Preconditioned<'a> {
    pub model: &'a MlpDenoiser,
    pub sigma_data: f64,
}

impl SampleDenoiser for Preconditioned<'_> {
    fn denoise_batch(&self, x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let s2 = sigma * sigma;
        let d2 = self.sigma_data * self.sigma_data;
        let sum = s2 + d2;
        let c_skip = d2 / sum;
        let c_out = sigma * self.sigma_data / sum.sqrt();
        let c_in = 1.0 / sum.sqrt();
        let c_noise = sigma.ln() / 4.0;

        let x_in = x.mapv(|v| c_in * v);
        let c = Array1::from_elem(x.nrows(), c_noise);
        let r = self
            .model
            .forward_batch(x_in.view(), c.view())
            .expect("dimensions fixed by construction");
        let mut out = x.mapv(|v| c_skip * v);
        out.zip_mut_with(&r, |o, &ri| *o += c_out * ri);
        out
    }
}

/// The closed-form optimal denoiser for isotropic Gaussian data: a
/// convergence oracle for the sampler.
pub struct AnalyticGaussian {
    pub sigma_data: f64,
}

impl SampleDenoiser for AnalyticGaussian {
    fn denoise_batch(&self, x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let d2 = self.sigma_data * self.sigma_data;
        let shrink = d2 / (d2 + sigma * sigma);
        x.mapv(|v| shrink * v)
    }
}

/// Integrate the probability-flow ODE from Gaussian noise down to data.
///
/// Initializes `x ~ Normal(0, sigma_max^2 I)` and applies Heun's method per
/// schedule step, falling back to Euler on the final step to zero.
/// Deterministic given the rng state.
pub fn ode_sample<R: Rng>(
    denoiser: &impl SampleDenoiser,
    schedule: &SigmaSchedule,
    n: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.validate()?;
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Array2::from_shape_fn((n, dim), |_| schedule.sigma_max * standard.sample(rng));
    let sigmas = schedule.sigmas();
    if sigmas.is_empty() {
        return Ok(x);
    }
    for w in sigmas.windows(2) {
        let (sigma, sigma_next) = (w[0], w[1]);
        let dt = sigma_next - sigma;
        let denoised = denoiser.denoise_batch(&x, sigma);
        // dx/dsigma = (x - D(x, sigma)) / sigma
        let d1 = (&x - &denoised) / sigma;
        if sigma_next > 0.0 {
            let x_euler = &x + &(&d1 * dt);
            let denoised2 = denoiser.denoise_batch(&x_euler, sigma_next);
            let d2 = (&x_euler - &denoised2) / sigma_next;
            x = &x + &((&d1 + &d2) * (0.5 * dt));
        } else {
            x = &x + &(&d1 * dt);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Sampling { sigma: sigma_next });
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Two-sample metrics
// ---------------------------------------------------------------------------

/// Above this many points the energy distance switches to a deterministic
/// content-seeded subsample.
pub const ENERGY_SUBSAMPLE_LIMIT: usize = 4096;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn content_hash(m: ArrayView2<f64>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in m.iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Deterministic subsample of at most `limit` rows. The index permutation is
/// seeded from the matrix contents, so the estimator is reproducible across
/// runs and independent of argument position.
fn subsample_rows(m: ArrayView2<f64>, hash: &[u8; 32], limit: usize) -> Array2<f64> {
    if m.nrows() <= limit {
        return m.to_owned();
    }
    let mut rng = ChaCha8Rng::from_seed(*hash);
    let mut indices: Vec<usize> = (0..m.nrows()).collect();
    // Partial Fisher-Yates: the first `limit` entries become the sample.
    for i in 0..limit {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut out = Array2::zeros((limit, m.ncols()));
    for (row, &idx) in indices[..limit].iter().enumerate() {
        out.row_mut(row).assign(&m.row(idx));
    }
    out
}

/// Energy distance `2 E||A - B|| - E||A - A'|| - E||B - B'||` via the
/// unbiased U-statistic (distinct pairs within each sample).
///
/// The summation order is canonicalized by content hash, so swapping the
/// arguments gives the bit-identical value.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Contract(
            "energy distance needs nonempty samples".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let hash_a = content_hash(a);
    let hash_b = content_hash(b);
    let (a, hash_a, b, hash_b) = if hash_a <= hash_b {
        (a, hash_a, b, hash_b)
    } else {
        (b, hash_b, a, hash_a)
    };
    let a = subsample_rows(a, &hash_a, ENERGY_SUBSAMPLE_LIMIT);
    let b = subsample_rows(b, &hash_b, ENERGY_SUBSAMPLE_LIMIT);
    let (n, m) = (a.nrows(), b.nrows());

    let rows_a: Vec<&[f64]> = a
        .rows()
        .into_iter()
        .map(|r| r.to_slice().unwrap())
        .collect();
    let rows_b: Vec<&[f64]> = b
        .rows()
        .into_iter()
        .map(|r| r.to_slice().unwrap())
        .collect();

    let mut cross = 0.0;
    for ra in &rows_a {
        for rb in &rows_b {
            cross += euclidean(ra, rb);
        }
    }
    cross /= (n * m) as f64;

    let within = |rows: &[&[f64]]| -> f64 {
        let k = rows.len();
        if k < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                sum += euclidean(rows[i], rows[j]);
            }
        }
        2.0 * sum / (k * (k - 1)) as f64
    };
    let within_a = within(&rows_a);
    let within_b = within(&rows_b);
    Ok(2.0 * cross - (within_a + within_b))
}

/// Mean 1-D Wasserstein-1 distance over random unit projection directions.
pub fn sliced_wasserstein<R: Rng>(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Contract(
            "sliced Wasserstein needs nonempty samples".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if n_projections == 0 {
        return Err(Error::Contract("need >= 1 projection".into()));
    }
    let dim = a.ncols();
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| standard.sample(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in &mut dir {
            *v /= norm;
        }
        let direction = Array1::from_vec(dir);
        let mut pa = a.dot(&direction).to_vec();
        let mut pb = b.dot(&direction).to_vec();
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        total += wasserstein_1d_sorted(&pa, &pb);
    }
    Ok(total / n_projections as f64)
}

/// W1 between sorted 1-D samples; quantile interpolation for unequal sizes.
fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let n = a.len();
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
    } else {
        let k = a.len().max(b.len());
        let quantile = |sorted: &[f64], q: f64| -> f64 {
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        };
        (0..k)
            .map(|i| {
                let q = (i as f64 + 0.5) / k as f64;
                (quantile(a, q) - quantile(b, q)).abs()
            })
            .sum::<f64>()
            / k as f64
    }
}

/// Two-sample metric scores for one batch of generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub seed: u64,
}

/// Score generated samples against a reference set.
///
/// The unbiased energy U-statistic can dip below zero on near-identical
/// samples; report fields are clamped at zero to keep the metric axioms.
pub fn evaluate_samples<R: Rng>(
    generated: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
    rng: &mut R,
) -> Result<MetricReport> {
    Ok(MetricReport {
        energy_distance: energy_distance(generated, reference)?.max(0.0),
        sliced_wasserstein: sliced_wasserstein(generated, reference, n_projections, rng)?,
        n_generated: generated.nrows(),
        n_reference: reference.nrows(),
        seed,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

/// One cell of the ablation grid.
#[derive(Debug)]
pub struct AblationRun {
    pub alpha: f64,
    pub kernel: WeightKernel,
    pub seed: u64,
    pub outcome: std::result::Result<Box<RunOutput>, String>,
}

impl AblationRun {
    pub fn metrics(&self) -> Option<&MetricReport> {
        self.outcome.as_ref().ok().map(|o| &o.report.final_metrics)
    }
}

/// Aggregated row: one (alpha, kernel) combination across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub kernel: WeightKernel,
    pub seeds: Vec<u64>,
    pub energy_per_seed: Vec<Option<f64>>,
    pub sw_per_seed: Vec<Option<f64>>,
    pub energy_mean: Option<f64>,
    pub energy_std: Option<f64>,
    pub sw_mean: Option<f64>,
    pub sw_std: Option<f64>,
    pub failed_seeds: Vec<u64>,
}

/// Mean and sample standard deviation over seed outcomes; std needs >= 2.
pub fn mean_and_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Execute the cross product of (alpha, kernel, seed) runs.
///
/// A failed run marks its cell as failed without aborting the sweep.
pub fn run_ablation(
    base: &RunConfig,
    alphas: &[f64],
    kernels: &[WeightKernel],
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    if alphas.is_empty() || kernels.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("ablation sweeps must be nonempty".into()));
    }
    let mut runs = Vec::with_capacity(alphas.len() * kernels.len() * seeds.len());
    for &alpha in alphas {
        for &kernel in kernels {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.weight.alpha = alpha;
                cfg.weight.kernel = kernel;
                cfg.seed = seed;
                let outcome = run_training(&cfg).map(Box::new).map_err(|e| e.to_string());
                runs.push(AblationRun {
                    alpha,
                    kernel,
                    seed,
                    outcome,
                });
            }
        }
    }
    Ok(runs)
}

/// Collapse per-run outcomes into one row per (alpha, kernel).
pub fn aggregate_ablation(runs: &[AblationRun], seeds: &[u64]) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for run in runs {
        let row = match rows
            .iter_mut()
            .find(|r| r.alpha == run.alpha && r.kernel == run.kernel)
        {
            Some(r) => r,
            None => {
                rows.push(AblationRow {
                    alpha: run.alpha,
                    kernel: run.kernel,
                    seeds: seeds.to_vec(),
                    energy_per_seed: vec![None; seeds.len()],
                    sw_per_seed: vec![None; seeds.len()],
                    energy_mean: None,
                    energy_std: None,
                    sw_mean: None,
                    sw_std: None,
                    failed_seeds: Vec::new(),
                });
                rows.last_mut().unwrap()
            }
        };
        let slot = seeds.iter().position(|&s| s == run.seed).unwrap_or(0);
        match run.metrics() {
            Some(m) => {
                row.energy_per_seed[slot] = Some(m.energy_distance);
                row.sw_per_seed[slot] = Some(m.sliced_wasserstein);
            }
            None => row.failed_seeds.push(run.seed),
        }
    }
    for row in &mut rows {
        let energies: Vec<f64> = row.energy_per_seed.iter().flatten().copied().collect();
        let sws: Vec<f64> = row.sw_per_seed.iter().flatten().copied().collect();
        (row.energy_mean, row.energy_std) = mean_and_std(&energies);
        (row.sw_mean, row.sw_std) = mean_and_std(&sws);
    }
    rows
}

/// Ablation table CSV: one row per (alpha, kernel), per-seed columns last so
/// the aggregates are recomputable from the file alone.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    use crate::artifacts::format_sig12;
    let seeds = rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
    let mut header = String::from("alpha,kernel,n_seeds,energy_mean,energy_std,sw_mean,sw_std");
    for s in &seeds {
        header.push_str(&format!(",energy_seed{s},sw_seed{s}"));
    }
    header.push_str(",failed_seeds");
    let mut out = header;
    out.push('\n');
    for row in rows {
        let fmt_opt = |v: Option<f64>| v.map(format_sig12).unwrap_or_default();
        let n_ok = row.energy_per_seed.iter().flatten().count();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            format_sig12(row.alpha),
            row.kernel.name(),
            n_ok,
            fmt_opt(row.energy_mean),
            fmt_opt(row.energy_std),
            fmt_opt(row.sw_mean),
            fmt_opt(row.sw_std),
        ));
        for i in 0..seeds.len() {
            out.push_str(&format!(
                ",{},{}",
                fmt_opt(row.energy_per_seed[i]),
                fmt_opt(row.sw_per_seed[i])
            ));
        }
        let failed: Vec<String> = row.failed_seeds.iter().map(|s| s.to_string()).collect();
        out.push(',');
        out.push_str(&failed.join(";"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::{arr2, Axis};

    #[test]
    fn gaussian_iso_has_requested_std() {
        let spec = DatasetSpec {
            variant: DatasetVariant::GaussianIso {
                dim: 2,
                sigma_data: 0.5,
            },
            n_train: 100_000,
        };
        let data = generate_dataset(&spec, &mut substream(0, "data"));
        for col in 0..2 {
            let column = data.index_axis(Axis(1), col);
            let mean = column.sum() / column.len() as f64;
            let std = (column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (column.len() - 1) as f64)
                .sqrt();
            assert!((std - 0.5).abs() < 0.01, "column {col} std {std}");
        }
    }

    #[test]
    fn single_component_mixture_is_shifted_gaussian() {
        let n = 50_000;
        let mixture = DatasetVariant::GaussianMixture {
            centers: vec![vec![2.0, -1.0]],
            component_std: 0.5,
        };
        let data = generate_samples(&mixture, n, &mut substream(1, "data"));
        let mean0 = data.index_axis(Axis(1), 0).sum() / n as f64;
        let mean1 = data.index_axis(Axis(1), 1).sum() / n as f64;
        assert!((mean0 - 2.0).abs() < 0.01, "mean {mean0}");
        assert!((mean1 + 1.0).abs() < 0.01, "mean {mean1}");
    }

    #[test]
    fn datasets_are_deterministic_per_seed() {
        for variant in [
            DatasetVariant::GaussianIso {
                dim: 2,
                sigma_data: 0.5,
            },
            DatasetVariant::TwoMoons { noise_std: 0.05 },
            DatasetVariant::Checkerboard { cells: 4 },
        ] {
            let a = generate_samples(&variant, 256, &mut substream(5, "data"));
            let b = generate_samples(&variant, 256, &mut substream(5, "data"));
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn schedule_is_strictly_decreasing_and_ends_at_zero() {
        let schedule = SigmaSchedule::default();
        let sigmas = schedule.sigmas();
        assert_eq!(sigmas.len(), 41);
        assert_eq!(sigmas[0], 80.0);
        assert!((sigmas[39] - 0.002).abs() < 1e-12);
        assert_eq!(*sigmas.last().unwrap(), 0.0);
        for w in sigmas.windows(2) {
            assert!(w[0] > w[1], "not decreasing at {w:?}");
        }
    }

    #[test]
    fn zero_step_schedule_returns_init() {
        let schedule = SigmaSchedule {
            n_steps: 0,
            ..SigmaSchedule::default()
        };
        let denoiser = AnalyticGaussian { sigma_data: 0.5 };
        let mut rng = substream(2, "ode");
        let out = ode_sample(&denoiser, &schedule, 64, 2, &mut rng).unwrap();
        let mut rng = substream(2, "ode");
        let standard = Normal::new(0.0, 1.0).unwrap();
        let init = Array2::from_shape_fn((64, 2), |_| 80.0 * standard.sample(&mut rng));
        assert_eq!(out, init);
    }

    #[test]
    fn ode_with_analytic_denoiser_contracts_to_data_covariance() {
        // For Gaussian data the flow has a closed-form contraction; the
        // generated covariance must land within 5% of sigma_data^2 I.
        let denoiser = AnalyticGaussian { sigma_data: 0.5 };
        let schedule = SigmaSchedule::default();
        let mut rng = substream(3, "ode");
        let samples = ode_sample(&denoiser, &schedule, 10_000, 2, &mut rng).unwrap();
        let n = samples.nrows() as f64;
        let mean0 = samples.index_axis(Axis(1), 0).sum() / n;
        let mean1 = samples.index_axis(Axis(1), 1).sum() / n;
        let mut cov = [[0.0f64; 2]; 2];
        for row in samples.outer_iter() {
            let d = [row[0] - mean0, row[1] - mean1];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        for r in cov.iter_mut() {
            for v in r.iter_mut() {
                *v /= n - 1.0;
            }
        }
        assert!((cov[0][0] - 0.25).abs() < 0.0125, "cov00 {}", cov[0][0]);
        assert!((cov[1][1] - 0.25).abs() < 0.0125, "cov11 {}", cov[1][1]);
        assert!(cov[0][1].abs() < 0.0125, "cov01 {}", cov[0][1]);
    }

    #[test]
    fn refining_the_schedule_does_not_hurt() {
        let denoiser = AnalyticGaussian { sigma_data: 0.5 };
        let reference = ode_sample(
            &denoiser,
            &SigmaSchedule {
                n_steps: 160,
                ..SigmaSchedule::default()
            },
            4000,
            2,
            &mut substream(4, "ode-ref"),
        )
        .unwrap();
        let coarse = ode_sample(
            &denoiser,
            &SigmaSchedule {
                n_steps: 20,
                ..SigmaSchedule::default()
            },
            4000,
            2,
            &mut substream(4, "ode-coarse"),
        )
        .unwrap();
        let fine = ode_sample(
            &denoiser,
            &SigmaSchedule {
                n_steps: 40,
                ..SigmaSchedule::default()
            },
            4000,
            2,
            &mut substream(4, "ode-fine"),
        )
        .unwrap();
        let d_coarse = energy_distance(coarse.view(), reference.view()).unwrap();
        let d_fine = energy_distance(fine.view(), reference.view()).unwrap();
        // Sampling noise allowance on top of the discretization ordering.
        assert!(
            d_fine <= d_coarse + 0.01,
            "refinement worsened: {d_coarse} -> {d_fine}"
        );
    }

    #[test]
    fn ode_is_deterministic() {
        let denoiser = AnalyticGaussian { sigma_data: 0.5 };
        let schedule = SigmaSchedule::default();
        let a = ode_sample(&denoiser, &schedule, 128, 2, &mut substream(6, "ode")).unwrap();
        let b = ode_sample(&denoiser, &schedule, 128, 2, &mut substream(6, "ode")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn energy_distance_of_identical_samples_is_tiny() {
        let mut rng = substream(7, "metric");
        let a = Array2::from_shape_fn((500, 2), |_| rng.random_range(-1.0..1.0));
        let d = energy_distance(a.view(), a.view()).unwrap();
        // The U-statistic's within-term excludes self-pairs, so this is
        // only zero up to the bias difference of the two estimators.
        assert!(d.abs() < 1e-2, "self distance {d}");
    }

    #[test]
    fn energy_distance_is_symmetric() {
        let mut rng = substream(8, "metric");
        let a = Array2::from_shape_fn((300, 2), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((400, 2), |_| rng.random_range(0.0..2.0));
        let ab = energy_distance(a.view(), b.view()).unwrap();
        let ba = energy_distance(b.view(), a.view()).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn energy_distance_of_separated_gaussians() {
        // Frozen Monte Carlo oracle (10^6 pairs) for two unit 2-D Gaussians
        // with means 0 and (10, 0): E||A-B|| = 10.09842, E||A-A'|| = sqrt(pi),
        // energy distance = 2 * 10.09842 - 2 * 1.7724539 = 16.65193.
        let mut rng = substream(9, "metric-oracle");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 4000;
        let a = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
        let b = Array2::from_shape_fn((n, 2), |(_, j)| {
            normal.sample(&mut rng) + if j == 0 { 10.0 } else { 0.0 }
        });
        let d = energy_distance(a.view(), b.view()).unwrap();
        let oracle = 16.65193;
        assert!(
            (d - oracle).abs() / oracle < 0.05,
            "energy distance {d} vs oracle {oracle}"
        );
    }

    #[test]
    fn subsampling_is_deterministic_and_bounded() {
        let mut rng = substream(10, "metric-sub");
        let a = Array2::from_shape_fn((6000, 2), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((5000, 2), |_| rng.random_range(-1.0..1.0));
        let d1 = energy_distance(a.view(), b.view()).unwrap();
        let d2 = energy_distance(a.view(), b.view()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn sliced_wasserstein_identical_is_zero() {
        let mut rng = substream(11, "sw");
        let a = Array2::from_shape_fn((200, 2), |_| rng.random_range(-1.0..1.0));
        let d = sliced_wasserstein(a.view(), a.view(), 64, &mut substream(11, "dirs")).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn sliced_wasserstein_point_masses_in_1d() {
        let a = arr2(&[[0.0]]);
        let b = arr2(&[[1.0]]);
        let d = sliced_wasserstein(a.view(), b.view(), 16, &mut substream(12, "dirs")).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn sliced_wasserstein_of_separated_gaussians() {
        // Shifting a distribution by d moves each projection by d * <u, e>;
        // W1 of a shifted 1-D distribution is the shift, so the sliced value
        // tends to d * E|cos theta| = d * 2 / pi in 2-D.
        let mut rng = substream(13, "sw-oracle");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 20_000;
        let shift = 10.0;
        let a = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
        let b = Array2::from_shape_fn((n, 2), |(_, j)| {
            normal.sample(&mut rng) + if j == 0 { shift } else { 0.0 }
        });
        let d = sliced_wasserstein(a.view(), b.view(), 512, &mut substream(13, "dirs")).unwrap();
        let oracle = shift * 2.0 / std::f64::consts::PI;
        assert!(
            (d - oracle).abs() / oracle < 0.03,
            "sw {d} vs oracle {oracle}"
        );
    }

    #[test]
    fn metric_dimension_mismatch_rejected() {
        let a = arr2(&[[0.0, 1.0]]);
        let b = arr2(&[[0.0, 1.0, 2.0]]);
        assert!(energy_distance(a.view(), b.view()).is_err());
        assert!(sliced_wasserstein(a.view(), b.view(), 4, &mut substream(0, "d")).is_err());
    }

    #[test]
    fn mean_and_std_aggregation() {
        assert_eq!(mean_and_std(&[]), (None, None));
        assert_eq!(mean_and_std(&[2.0]), (Some(2.0), None));
        let (mean, std) = mean_and_std(&[1.0, 2.0, 3.0]);
        assert_eq!(mean, Some(2.0));
        assert!((std.unwrap() - 1.0).abs() < 1e-15);
    }
}
