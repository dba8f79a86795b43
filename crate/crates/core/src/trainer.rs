//! The full adaptive-log-SNR-reweighted EDM training loop.
//!
//! Each step draws a mini-batch, samples a noise level per sample, corrupts,
//! preconditions, denoises, weights the per-sample EDM losses by the adaptive
//! kernel centered at the batch-mean log-SNR, mean-reduces, backpropagates,
//! and applies a bias-corrected Adam update. The baseline is the same loop
//! with alpha = 0, which leaves every number bit-identical to an unweighted
//! EDM loop under a shared seed.
//!
//! Unweighted per-sample losses stream into the telemetry bins keyed by
//! log-SNR; snapshots are taken at configured fractions of the run and
//! two-sample metrics are evaluated at the configured cadence.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_weight::{batch_weights, BatchLambdas, CenterMode, WeightConfig};
use crate::denoiser_model::{CheckpointFormat, MlpDenoiser};
use crate::edm_core::precondition;
use crate::error::{Error, Result};
use crate::generation_eval::{
    evaluate_samples, generate_dataset, generate_samples, ode_sample, DatasetSpec, MetricReport,
    Preconditioned, SigmaSchedule,
};
use crate::rng::{labels, substream};
use crate::snr_domain::{draw_noise_level, SamplerSpec};
use crate::telemetry::{BinGrid, BinnedStats, StageSnapshot};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam shapes disagree: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_bins: usize,
    /// Snapshot points as fractions of the total step count.
    pub snapshot_fractions: Vec<f64>,
    /// Record the weighted loss instead of the unweighted one.
    pub record_weighted: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            lambda_min: -12.0,
            lambda_max: 12.0,
            n_bins: 32,
            snapshot_fractions: vec![1.0 / 6.0, 0.5, 1.0],
            record_weighted: false,
        }
    }
}

impl TelemetryConfig {
    pub fn grid(&self) -> Result<BinGrid> {
        BinGrid::new(self.lambda_min, self.lambda_max, self.n_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps; 0 means final evaluation only.
    pub cadence: u64,
    pub n_samples: usize,
    pub n_reference: usize,
    pub n_projections: usize,
    pub schedule: SigmaSchedule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cadence: 2000,
            n_samples: 10_000,
            n_reference: 10_000,
            n_projections: 128,
            schedule: SigmaSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub n_frequencies: usize,
    pub checkpoint_format: CheckpointFormat,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            n_frequencies: 16,
            checkpoint_format: CheckpointFormat::Json,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub sampler: SamplerSpec,
    pub weight: WeightConfig,
    pub sigma_data: f64,
    pub telemetry: TelemetryConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Desk-scale reference configuration: 6000 steps of batch 128 at the
    /// published learning rate.
    pub fn reference(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            steps: 6000,
            batch_size: 128,
            adam: AdamParams::default(),
            seed: 0,
            sampler: SamplerSpec::default_log_normal(),
            weight: WeightConfig::default(),
            sigma_data: 0.5,
            telemetry: TelemetryConfig::default(),
            eval: EvalConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.adam.learning_rate
            )));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_data must be positive, got {}",
                self.sigma_data
            )));
        }
        self.sampler.validate()?;
        self.weight.validate()?;
        self.telemetry.grid()?;
        for &f in &self.telemetry.snapshot_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "snapshot fractions must lie in (0, 1], got {f}"
                )));
            }
        }
        self.eval.schedule.validate()?;
        if self.eval.n_samples == 0 || self.eval.n_reference == 0 {
            return Err(Error::Config("eval sample counts must be >= 1".into()));
        }
        if self.eval.n_projections == 0 {
            return Err(Error::Config("eval n_projections must be >= 1".into()));
        }
        if self.model.hidden.contains(&0) || self.model.n_frequencies == 0 {
            return Err(Error::Config(
                "model widths and n_frequencies must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Steps at which telemetry snapshots are taken.
    pub fn snapshot_steps(&self) -> Vec<u64> {
        let mut steps: Vec<u64> = self
            .telemetry
            .snapshot_fractions
            .iter()
            .map(|f| ((f * self.steps as f64).round() as u64).clamp(1, self.steps.max(1)))
            .collect();
        steps.sort_unstable();
        steps.dedup();
        steps.retain(|&s| s <= self.steps);
        steps
    }
}

// ---------------------------------------------------------------------------
// Step records and curves
// ---------------------------------------------------------------------------

/// Per-step batch summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean adaptive-weighted loss over the batch (the optimized objective).
    pub weighted_loss: f64,
    /// Mean unweighted EDM loss over the batch.
    pub unweighted_loss: f64,
    /// Mean adaptive weight over the batch.
    pub mean_weight: f64,
}

/// Loss trajectory of a run; steps strictly increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    records: Vec<StepRecord>,
}

impl TrainingCurve {
    pub fn push(&mut self, record: StepRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "curve steps must increase");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean weighted loss over the leading `frac` of recorded steps.
    pub fn leading_mean(&self, frac: f64) -> f64 {
        let k = ((self.records.len() as f64 * frac).ceil() as usize).max(1);
        let head = &self.records[..k.min(self.records.len())];
        head.iter().map(|r| r.weighted_loss).sum::<f64>() / head.len() as f64
    }

    /// Mean weighted loss over the trailing `frac` of recorded steps.
    pub fn trailing_mean(&self, frac: f64) -> f64 {
        let k = ((self.records.len() as f64 * frac).ceil() as usize).max(1);
        let start = self.records.len().saturating_sub(k);
        let tail = &self.records[start..];
        tail.iter().map(|r| r.weighted_loss).sum::<f64>() / tail.len() as f64
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub curve: TrainingCurve,
    pub snapshots: Vec<StageSnapshot>,
    pub telemetry: BinnedStats,
    /// (step, metrics) at each evaluation point, final step included.
    pub eval_points: Vec<(u64, MetricReport)>,
    pub final_metrics: MetricReport,
}

/// A finished run: its report plus the trained model.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: MlpDenoiser,
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Mutable state of one training run.
pub struct Trainer {
    cfg: RunConfig,
    data: Array2<f64>,
    model: MlpDenoiser,
    adam_state: AdamState,
    stats: BinnedStats,
    noise_rng: rand_chacha::ChaCha8Rng,
    batch_rng: rand_chacha::ChaCha8Rng,
    ema_center: Option<f64>,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_dataset(&cfg.dataset, &mut substream(cfg.seed, labels::DATA));
        let model = MlpDenoiser::new(
            cfg.dataset.variant.dim(),
            &cfg.model.hidden,
            cfg.model.n_frequencies,
            &mut substream(cfg.seed, labels::INIT),
        )?;
        let stats = BinnedStats::new(cfg.telemetry.grid()?);
        let noise_rng = substream(cfg.seed, labels::NOISE);
        let batch_rng = substream(cfg.seed, labels::BATCH);
        let adam_state = AdamState::new(model.n_params());
        Ok(Self {
            cfg,
            data,
            model,
            adam_state,
            stats,
            noise_rng,
            batch_rng,
            ema_center: None,
            step: 0,
        })
    }

    pub fn model(&self) -> &MlpDenoiser {
        &self.model
    }

    pub fn stats(&self) -> &BinnedStats {
        &self.stats
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn next_batch(&mut self) -> Array2<f64> {
        let dim = self.data.ncols();
        let mut batch = Array2::zeros((self.cfg.batch_size, dim));
        for i in 0..self.cfg.batch_size {
            let idx = self.batch_rng.random_range(0..self.data.nrows());
            batch.row_mut(i).assign(&self.data.row(idx));
        }
        batch
    }

    /// Run one training step over a fresh mini-batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        self.step += 1;
        let b = batch.nrows();
        let dim = batch.ncols();

        // Per-sample noise levels, then the noise matrix, in a fixed order.
        let mut sigmas = Vec::with_capacity(b);
        let mut lambdas = Vec::with_capacity(b);
        for _ in 0..b {
            let draw =
                draw_noise_level(&self.cfg.sampler, self.cfg.sigma_data, &mut self.noise_rng)?;
            sigmas.push(draw.sigma);
            lambdas.push(draw.lambda);
        }
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
        let eps = Array2::from_shape_fn((b, dim), |_| {
            rand_distr::Distribution::sample(&normal, &mut self.noise_rng)
        });

        // Corrupt and precondition.
        let mut x_tilde = batch.clone();
        for (i, mut row) in x_tilde.outer_iter_mut().enumerate() {
            let s = sigmas[i].get();
            for (v, e) in row.iter_mut().zip(eps.row(i)) {
                *v += s * e;
            }
        }
        let coeffs: Vec<_> = sigmas
            .iter()
            .map(|&s| precondition(s, self.cfg.sigma_data))
            .collect::<Result<_>>()?;

        let mut x_in = x_tilde.clone();
        for (i, mut row) in x_in.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| coeffs[i].c_in * v);
        }
        let c_noise: Array1<f64> = sigmas.iter().map(|s| s.get().ln() / 4.0).collect();

        // Denoise.
        let (r, cache) = self
            .model
            .forward_batch_cached(x_in.view(), c_noise.view())?;
        let mut denoised = x_tilde.clone();
        for (i, mut row) in denoised.outer_iter_mut().enumerate() {
            let (c_skip, c_out) = (coeffs[i].c_skip, coeffs[i].c_out);
            for (v, ri) in row.iter_mut().zip(r.row(i)) {
                *v = c_skip * *v + c_out * ri;
            }
        }

        // Per-sample EDM losses (sum of squares scaled by w_edm).
        let mut losses = Vec::with_capacity(b);
        for i in 0..b {
            let sq: f64 = denoised
                .row(i)
                .iter()
                .zip(batch.row(i))
                .map(|(d, x)| (d - x) * (d - x))
                .sum();
            losses.push(coeffs[i].w_edm * sq);
        }

        // Adaptive weights centered per batch (optionally EMA-smoothed).
        let batch_lambdas = BatchLambdas::new(lambdas.clone(), &self.cfg.weight)?;
        let center = match (
            self.cfg.weight.center_mode,
            self.cfg.weight.center_ema_momentum,
        ) {
            (CenterMode::BatchMean, Some(momentum)) => {
                let c = match self.ema_center {
                    Some(prev) => momentum * prev + (1.0 - momentum) * batch_lambdas.center(),
                    None => batch_lambdas.center(),
                };
                self.ema_center = Some(c);
                c
            }
            _ => batch_lambdas.center(),
        };
        let resolved = BatchLambdasWithCenter {
            lambdas: &lambdas,
            center,
        };
        let weights = resolved.weights(&self.cfg.weight);

        let weighted: Vec<f64> = losses.iter().zip(&weights).map(|(l, w)| l * w).collect();
        let unweighted_mean = losses.iter().sum::<f64>() / b as f64;
        let weighted_mean = weighted.iter().sum::<f64>() / b as f64;
        let mean_weight = weights.iter().sum::<f64>() / b as f64;

        if !weighted_mean.is_finite() || !unweighted_mean.is_finite() {
            let sigma_list: Vec<f64> = sigmas.iter().map(|s| s.get()).collect();
            let bad = losses.iter().filter(|l| !l.is_finite()).count();
            return Err(Error::NonFinite {
                step: self.step,
                diagnostics: format!(
                    "{bad}/{b} non-finite per-sample losses; weighted mean {weighted_mean}; \
                     sigma range [{:?}, {:?}]; draws {sigma_list:?}",
                    sigma_list.iter().cloned().fold(f64::INFINITY, f64::min),
                    sigma_list.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ),
            });
        }

        // Telemetry sees the unweighted loss by default so baseline and
        // adaptive runs are compared on the same quantity.
        for (i, &lam) in lambdas.iter().enumerate() {
            let value = if self.cfg.telemetry.record_weighted {
                weighted[i]
            } else {
                losses[i]
            };
            self.stats.record(lam, value);
        }

        // d(mean weighted loss)/dD = w * w_edm * 2 (D - x) / B, and the
        // model sees c_out * that through D = c_skip x_tilde + c_out r.
        let mut upstream = Array2::zeros((b, dim));
        for i in 0..b {
            let scale = weights[i] * coeffs[i].w_edm * 2.0 / b as f64 * coeffs[i].c_out;
            for j in 0..dim {
                upstream[[i, j]] = scale * (denoised[[i, j]] - batch[[i, j]]);
            }
        }
        let grads = self.model.backward_batch(&cache, upstream.view())?;
        let mut params = self.model.params_flat();
        adam_update(&mut params, &grads, &mut self.adam_state, &self.cfg.adam)?;
        self.model.set_params_flat(&params)?;

        Ok(StepRecord {
            step: self.step,
            weighted_loss: weighted_mean,
            unweighted_loss: unweighted_mean,
            mean_weight,
        })
    }

    /// Generate from the current model and score against a reference set.
    ///
    /// Every evaluation re-derives the same eval substream, so checkpoints
    /// along one run are compared on common random numbers.
    pub fn evaluate(&self, reference: &Array2<f64>) -> Result<MetricReport> {
        let mut eval_rng = substream(self.cfg.seed, labels::EVAL);
        let denoiser = Preconditioned {
            model: &self.model,
            sigma_data: self.cfg.sigma_data,
        };
        let generated = ode_sample(
            &denoiser,
            &self.cfg.eval.schedule,
            self.cfg.eval.n_samples,
            self.data.ncols(),
            &mut eval_rng,
        )?;
        evaluate_samples(
            generated.view(),
            reference.view(),
            self.cfg.eval.n_projections,
            self.cfg.seed,
            &mut eval_rng,
        )
    }
}

/// A lambda batch with an externally resolved center (EMA or fixed).
struct BatchLambdasWithCenter<'a> {
    lambdas: &'a [crate::snr_domain::LogSnr],
    center: f64,
}

impl BatchLambdasWithCenter<'_> {
    fn weights(&self, cfg: &WeightConfig) -> Vec<f64> {
        let batch = BatchLambdas::new(
            self.lambdas.to_vec(),
            &WeightConfig {
                center_mode: CenterMode::FixedValue(self.center),
                ..cfg.clone()
            },
        )
        .expect("fixed center never fails");
        batch_weights(&batch, cfg)
    }
}

/// Execute a full run: training, telemetry snapshots, and evaluations.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let reference = generate_samples(
        &cfg.dataset.variant,
        cfg.eval.n_reference,
        &mut substream(cfg.seed, labels::REFERENCE),
    );

    let snapshot_steps = cfg.snapshot_steps();
    let mut curve = TrainingCurve::default();
    let mut snapshots = Vec::new();
    let mut eval_points = Vec::new();

    if cfg.steps == 0 {
        let metrics = trainer.evaluate(&reference)?;
        eval_points.push((0, metrics));
    }

    for step in 1..=cfg.steps {
        let record = trainer.train_step()?;
        debug_assert_eq!(record.step, step);
        curve.push(record);
        if snapshot_steps.contains(&step) {
            snapshots.push(trainer.stats().snapshot(step));
        }
        let cadence_hit = cfg.eval.cadence > 0 && step % cfg.eval.cadence == 0;
        if cadence_hit || step == cfg.steps {
            let metrics = trainer.evaluate(&reference)?;
            eval_points.push((step, metrics));
        }
    }

    let final_metrics = eval_points
        .last()
        .map(|(_, m)| *m)
        .expect("at least one evaluation");
    let report = RunReport {
        config: cfg.clone(),
        curve,
        snapshots,
        telemetry: trainer.stats().clone(),
        eval_points,
        final_metrics,
    };
    Ok(RunOutput {
        report,
        model: trainer.model,
    })
}
