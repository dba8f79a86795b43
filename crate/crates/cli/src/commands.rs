//! Implementations of the train, eval, variance-lab, and ablate subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use alsr_core::adaptive_weight::WeightKernel;
use alsr_core::artifacts::{
    write_curve_csv, write_eval_curve_csv, write_manifest, write_metrics_json, MetricsFile,
    METRIC_NOTE,
};
use alsr_core::config::{load_config, resolved_config_toml};
use alsr_core::denoiser_model::{load_checkpoint, save_checkpoint};
use alsr_core::error::{Error, Result};
use alsr_core::generation_eval::{
    ablation_csv, aggregate_ablation, evaluate_samples, generate_samples, ode_sample, run_ablation,
    AblationRun, Preconditioned,
};
use alsr_core::rng::{labels, substream};
use alsr_core::telemetry::{export_heatmap, variance_concentration};
use alsr_core::trainer::{run_training, RunConfig, RunOutput};
use alsr_core::variance_lab::{
    default_resolution, estimator_variance, optimal_proposal, total_variance_decompose,
    verify_optimality, DiscretePopulation, ProposalMode,
};

/// Write one finished run into `out`: curve, eval curve, heatmap, metrics,
/// resolved config, checkpoint, and the manifest.
pub fn write_run_artifacts(output: &RunOutput, cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let report = &output.report;
    let mut files: Vec<PathBuf> = Vec::new();

    write_curve_csv(&report.curve, &out.join("curve.csv"))?;
    files.push("curve.csv".into());

    write_eval_curve_csv(&report.eval_points, &out.join("eval_curve.csv"))?;
    files.push("eval_curve.csv".into());

    if !report.snapshots.is_empty() {
        export_heatmap(&report.snapshots, &out.join("heatmap.csv"))?;
        files.push("heatmap.csv".into());
    }

    let metrics = MetricsFile {
        note: METRIC_NOTE.into(),
        alpha: cfg.weight.alpha,
        kernel: cfg.weight.kernel.name().into(),
        seed: cfg.seed,
        steps: cfg.steps,
        final_metrics: report.final_metrics,
        variance_concentration: report
            .snapshots
            .last()
            .and_then(|s| variance_concentration(&s.stats).ok()),
        leading_loss: if report.curve.is_empty() {
            0.0
        } else {
            report.curve.leading_mean(0.1)
        },
        trailing_loss: if report.curve.is_empty() {
            0.0
        } else {
            report.curve.trailing_mean(0.1)
        },
    };
    write_metrics_json(&metrics, &out.join("metrics.json"))?;
    files.push("metrics.json".into());

    std::fs::write(out.join("resolved_config.toml"), resolved_config_toml(cfg)?)?;
    files.push("resolved_config.toml".into());

    let ckpt_name = cfg.model.checkpoint_format.file_name();
    save_checkpoint(
        &output.model,
        &out.join(ckpt_name),
        cfg.model.checkpoint_format,
    )?;
    files.push(ckpt_name.into());

    write_manifest(out, &files)?;
    Ok(())
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let output = run_training(&cfg)?;
    write_run_artifacts(&output, &cfg, out)?;
    println!(
        "run complete: {} steps, final energy distance {:.6}, sliced Wasserstein {:.6}",
        cfg.steps,
        output.report.final_metrics.energy_distance,
        output.report.final_metrics.sliced_wasserstein
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_checkpoint(checkpoint)?;
    if model.data_dim() != cfg.dataset.variant.dim() {
        return Err(Error::Config(format!(
            "checkpoint dimension {} does not match dataset dimension {}",
            model.data_dim(),
            cfg.dataset.variant.dim()
        )));
    }
    std::fs::create_dir_all(out)?;

    let reference = generate_samples(
        &cfg.dataset.variant,
        cfg.eval.n_reference,
        &mut substream(cfg.seed, labels::REFERENCE),
    );
    // Same eval substream as training-time evaluations: scoring a run's
    // final checkpoint reproduces its metrics.json exactly.
    let mut eval_rng = substream(cfg.seed, labels::EVAL);
    let denoiser = Preconditioned {
        model: &model,
        sigma_data: cfg.sigma_data,
    };
    let generated = ode_sample(
        &denoiser,
        &cfg.eval.schedule,
        cfg.eval.n_samples,
        cfg.dataset.variant.dim(),
        &mut eval_rng,
    )?;
    let metrics = evaluate_samples(
        generated.view(),
        reference.view(),
        cfg.eval.n_projections,
        cfg.seed,
        &mut eval_rng,
    )?;

    let file = MetricsFile {
        note: METRIC_NOTE.into(),
        alpha: cfg.weight.alpha,
        kernel: cfg.weight.kernel.name().into(),
        seed: cfg.seed,
        steps: 0,
        final_metrics: metrics,
        variance_concentration: None,
        leading_loss: 0.0,
        trailing_loss: 0.0,
    };
    write_metrics_json(&file, &out.join("metrics.json"))?;
    write_manifest(out, &["metrics.json".into()])?;
    println!(
        "energy distance {:.6}, sliced Wasserstein {:.6}",
        metrics.energy_distance, metrics.sliced_wasserstein
    );
    Ok(())
}

/// Population spec file for the variance lab.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationFile {
    lambdas: Vec<f64>,
    base_prob: Vec<f64>,
    cond_mean: Vec<f64>,
    cond_var: Vec<f64>,
    resolution: Option<usize>,
}

#[derive(Debug, Serialize)]
struct VarianceLabReport {
    population: DiscretePopulation,
    decomposition: alsr_core::variance_lab::VarianceDecomposition,
    cond_std_proposal: Vec<f64>,
    cond_std_variance: f64,
    full_second_moment_proposal: Vec<f64>,
    full_second_moment_variance: f64,
    base_variance: f64,
    lattice: alsr_core::variance_lab::OptimalityReport,
}

pub fn variance_lab(population: &Path, out: &Path, resolution: Option<usize>) -> Result<()> {
    let text = std::fs::read_to_string(population)?;
    let file: PopulationFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad population spec: {e}")))?;
    let pop = DiscretePopulation::new(file.lambdas, file.base_prob, file.cond_mean, file.cond_var)?;
    let resolution = resolution
        .or(file.resolution)
        .unwrap_or_else(|| default_resolution(pop.len()));

    let decomposition = total_variance_decompose(&pop);
    let cond_std = optimal_proposal(&pop, ProposalMode::CondStd)?;
    let full = optimal_proposal(&pop, ProposalMode::FullSecondMoment)?;
    let report = VarianceLabReport {
        cond_std_variance: estimator_variance(&pop, &cond_std, 1)?,
        full_second_moment_variance: estimator_variance(&pop, &full, 1)?,
        base_variance: estimator_variance(&pop, &pop.base_proposal(), 1)?,
        cond_std_proposal: cond_std.probs().to_vec(),
        full_second_moment_proposal: full.probs().to_vec(),
        lattice: verify_optimality(&pop, resolution)?,
        decomposition,
        population: pop,
    };

    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    std::fs::write(out.join("report.json"), text + "\n")?;
    write_manifest(out, &["report.json".into()])?;
    println!(
        "within {:.6}, between {:.6}; optimal variance {:.6} vs base {:.6}; lattice check {}",
        report.decomposition.within,
        report.decomposition.between,
        report.full_second_moment_variance,
        report.base_variance,
        if report.lattice.holds {
            "holds"
        } else {
            "FAILED"
        }
    );
    Ok(())
}

fn parse_kernels(names: &[String]) -> Result<Vec<WeightKernel>> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "rational" => Ok(WeightKernel::Rational),
            "exponential" => Ok(WeightKernel::Exponential),
            other => Err(Error::Config(format!(
                "unknown kernel {other:?}; expected rational or exponential"
            ))),
        })
        .collect()
}

fn cell_dir_name(run: &AblationRun) -> String {
    let mut name = String::new();
    let _ = write!(
        name,
        "run-alpha{}-{}-seed{}",
        run.alpha,
        run.kernel.name(),
        run.seed
    );
    name
}

pub fn ablate(
    config: &Path,
    out: &Path,
    alphas: &[f64],
    kernels: &[String],
    seeds: &[u64],
) -> Result<()> {
    let base = load_config(config)?;
    let kernels = parse_kernels(kernels)?;
    let runs = run_ablation(&base, alphas, &kernels, seeds)?;

    std::fs::create_dir_all(out)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for run in &runs {
        if let Ok(output) = &run.outcome {
            let mut cfg = base.clone();
            cfg.weight.alpha = run.alpha;
            cfg.weight.kernel = run.kernel;
            cfg.seed = run.seed;
            let dir = out.join(cell_dir_name(run));
            write_run_artifacts(output, &cfg, &dir)?;
        }
    }

    let rows = aggregate_ablation(&runs, seeds);
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    files.push("ablation.csv".into());
    write_manifest(out, &files)?;

    let failed: Vec<String> = runs
        .iter()
        .filter(|r| r.outcome.is_err())
        .map(|r| format!("alpha {} {} seed {}", r.alpha, r.kernel.name(), r.seed))
        .collect();
    println!(
        "{} runs complete, {} failed; table in {}",
        runs.len() - failed.len(),
        failed.len(),
        out.join("ablation.csv").display()
    );
    if !failed.is_empty() {
        return Err(Error::Contract(format!(
            "{} ablation cells failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    Ok(())
}
