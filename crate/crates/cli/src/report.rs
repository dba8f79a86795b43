//! Report assembly: merge finished run directories into one comparison
//! table, concatenated heatmaps, and a markdown summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alsr_core::artifacts::{format_sig12, read_metrics_json, write_manifest, MetricsFile};
use alsr_core::error::{Error, Result};
use alsr_core::generation_eval::mean_and_std;
use alsr_core::telemetry::{parse_heatmap, HEATMAP_HEADER};

struct LoadedRun {
    dir: PathBuf,
    metrics: MetricsFile,
}

/// Runs grouped for the comparison table: baseline is alpha = 0.
fn group_label(metrics: &MetricsFile) -> String {
    if metrics.alpha == 0.0 {
        "baseline".to_string()
    } else {
        format!("alpha={} kernel={}", metrics.alpha, metrics.kernel)
    }
}

/// Merge run directories into `out`. Missing or corrupt runs become error
/// entries; the partial report is still produced, and an error is returned
/// so the process exits nonzero.
pub fn assemble(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut sorted_runs: Vec<PathBuf> = runs.to_vec();
    sorted_runs.sort();

    let mut loaded: Vec<LoadedRun> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    for dir in &sorted_runs {
        match read_metrics_json(&dir.join("metrics.json")) {
            Ok(metrics) => loaded.push(LoadedRun {
                dir: dir.clone(),
                metrics,
            }),
            Err(e) => errors.push(format!("{}: {e}", dir.display())),
        }
    }

    // Comparison table: one row per group, mean +- sample std across seeds.
    let mut groups: Vec<(String, Vec<&LoadedRun>)> = Vec::new();
    for run in &loaded {
        let label = group_label(&run.metrics);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, members)) => members.push(run),
            None => groups.push((label, vec![run])),
        }
    }

    let mut table = String::from(
        "group,n_runs,energy_mean,energy_std,sw_mean,sw_std,variance_concentration_mean,seeds\n",
    );
    for (label, members) in &groups {
        let energies: Vec<f64> = members
            .iter()
            .map(|r| r.metrics.final_metrics.energy_distance)
            .collect();
        let sws: Vec<f64> = members
            .iter()
            .map(|r| r.metrics.final_metrics.sliced_wasserstein)
            .collect();
        let concentrations: Vec<f64> = members
            .iter()
            .filter_map(|r| r.metrics.variance_concentration)
            .collect();
        let (e_mean, e_std) = mean_and_std(&energies);
        let (s_mean, s_std) = mean_and_std(&sws);
        let (c_mean, _) = mean_and_std(&concentrations);
        let fmt = |v: Option<f64>| v.map(format_sig12).unwrap_or_default();
        let seeds: Vec<String> = members.iter().map(|r| r.metrics.seed.to_string()).collect();
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            label,
            members.len(),
            fmt(e_mean),
            fmt(e_std),
            fmt(s_mean),
            fmt(s_std),
            fmt(c_mean),
            seeds.join(";")
        );
    }
    std::fs::write(out.join("comparison_table.csv"), &table)?;

    // Concatenated heatmaps with a run label column.
    let mut heatmaps = format!("run,{HEATMAP_HEADER}\n");
    let mut any_heatmap = false;
    for run in &loaded {
        let path = run.dir.join("heatmap.csv");
        if !path.exists() {
            continue;
        }
        match parse_heatmap(&path) {
            Ok(rows) => {
                any_heatmap = true;
                let label = run
                    .dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| run.dir.display().to_string());
                for row in rows {
                    let _ = writeln!(
                        heatmaps,
                        "{},{},{},{},{},{},{},{}",
                        label,
                        row.step,
                        row.bin_index,
                        format_sig12(row.lambda_lo),
                        format_sig12(row.lambda_hi),
                        row.count,
                        row.mean.map(format_sig12).unwrap_or_default(),
                        row.variance.map(format_sig12).unwrap_or_default()
                    );
                }
            }
            Err(e) => errors.push(format!("{}: heatmap: {e}", run.dir.display())),
        }
    }
    let mut files: Vec<PathBuf> = vec!["comparison_table.csv".into(), "report.md".into()];
    if any_heatmap {
        std::fs::write(out.join("combined_heatmaps.csv"), &heatmaps)?;
        files.push("combined_heatmaps.csv".into());
    }

    // Markdown summary naming every generated file.
    let mut md = String::from("# Run comparison report\n\n");
    if let Some(run) = loaded.first() {
        let _ = writeln!(md, "> {}\n", run.metrics.note);
    }
    md.push_str("## Generated files\n\n");
    let mut listed = files.clone();
    listed.push("manifest.json".into());
    listed.sort();
    for f in &listed {
        let _ = writeln!(md, "- `{}`", f.display());
    }
    md.push_str("\n## Runs\n\n");
    md.push_str("| run | group | seed | energy distance | sliced Wasserstein |\n");
    md.push_str("| --- | --- | --- | --- | --- |\n");
    for run in &loaded {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            run.dir.display(),
            group_label(&run.metrics),
            run.metrics.seed,
            format_sig12(run.metrics.final_metrics.energy_distance),
            format_sig12(run.metrics.final_metrics.sliced_wasserstein)
        );
    }
    if !errors.is_empty() {
        md.push_str("\n## Errors\n\n");
        for e in &errors {
            let _ = writeln!(md, "- {e}");
        }
    }
    std::fs::write(out.join("report.md"), &md)?;

    write_manifest(out, &files)?;

    if errors.is_empty() {
        println!(
            "report over {} runs in {} groups written to {}",
            loaded.len(),
            groups.len(),
            out.display()
        );
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{} run directories had errors; partial report written",
            errors.len()
        )))
    }
}
