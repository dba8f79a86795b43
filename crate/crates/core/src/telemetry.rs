//! Streaming conditional loss statistics over log-SNR bins.
//!
//! Per-sample losses are binned by their log-SNR value; each bin keeps a
//! Welford-style running count/mean/m2 so conditional mean and variance are
//! available at any point of training without storing samples. Snapshots
//! freeze the accumulated state at chosen steps, and the heatmap export
//! writes one CSV row per (snapshot, bin).
//!
//! Values outside the grid are clamped into the edge bins so exports stay
//! total-preserving, while dedicated out-of-range counters keep the anomaly
//! visible.

use std::io::Write;
use std::path::Path;

use crate::artifacts::format_sig12;
use crate::error::{Error, Result};
use crate::snr_domain::LogSnr;

/// A uniform binning of a log-SNR interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinGrid {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_bins: usize,
}

impl BinGrid {
    pub fn new(lambda_min: f64, lambda_max: f64, n_bins: usize) -> Result<Self> {
        if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) {
            return Err(Error::Config(format!(
                "bin grid needs lambda_min < lambda_max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        if n_bins < 2 {
            return Err(Error::Config(format!(
                "bin grid needs n_bins >= 2, got {n_bins}"
            )));
        }
        Ok(Self {
            lambda_min,
            lambda_max,
            n_bins,
        })
    }

    /// Default grid: 32 uniform bins over [-12, 12], covering the log-normal
    /// default's +-4 std in lambda space.
    pub fn default_grid() -> Self {
        Self {
            lambda_min: -12.0,
            lambda_max: 12.0,
            n_bins: 32,
        }
    }

    pub fn width(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / self.n_bins as f64
    }

    /// Exact partition edges of bin `index`.
    pub fn edges(&self, index: usize) -> (f64, f64) {
        let lo = self.lambda_min + index as f64 * self.width();
        let hi = if index + 1 == self.n_bins {
            self.lambda_max
        } else {
            self.lambda_min + (index + 1) as f64 * self.width()
        };
        (lo, hi)
    }

    fn locate(&self, lambda: f64) -> Location {
        if lambda < self.lambda_min {
            return Location::Below;
        }
        if lambda > self.lambda_max {
            return Location::Above;
        }
        let idx = ((lambda - self.lambda_min) / self.width()).floor() as usize;
        Location::Inside(idx.min(self.n_bins - 1))
    }
}

enum Location {
    Below,
    Inside(usize),
    Above,
}

/// Single-pass running count/mean/m2 for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn record(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    /// Chan parallel combine; exact for either side empty.
    fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * (other.count as f64 / count as f64);
        self.m2 +=
            other.m2 + delta * delta * (self.count as f64 * other.count as f64 / count as f64);
        self.count = count;
    }

    /// Sample variance (n - 1 denominator); defined only for count >= 2.
    fn variance(&self) -> Option<f64> {
        if self.count >= 2 {
            Some(self.m2 / (self.count - 1) as f64)
        } else {
            None
        }
    }

    fn mean(&self) -> Option<f64> {
        if self.count >= 1 {
            Some(self.mean)
        } else {
            None
        }
    }
}

/// Streaming per-bin loss statistics plus out-of-range counters.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStats {
    grid: BinGrid,
    bins: Vec<Welford>,
    out_of_range_low: u64,
    out_of_range_high: u64,
}

impl BinnedStats {
    pub fn new(grid: BinGrid) -> Self {
        Self {
            grid,
            bins: vec![Welford::default(); grid.n_bins],
            out_of_range_low: 0,
            out_of_range_high: 0,
        }
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    /// Record one (lambda, loss) observation.
    ///
    /// Out-of-range lambdas are clamped into the edge bin for stats and
    /// counted separately; they are never an error.
    pub fn record(&mut self, lambda: LogSnr, loss_value: f64) {
        let idx = match self.grid.locate(lambda.get()) {
            Location::Inside(i) => i,
            Location::Below => {
                self.out_of_range_low += 1;
                0
            }
            Location::Above => {
                self.out_of_range_high += 1;
                self.grid.n_bins - 1
            }
        };
        self.bins[idx].record(loss_value);
    }

    /// Combine stats accumulated by another instance over the same grid.
    ///
    /// Merging equals recording the concatenated stream.
    pub fn merge(&mut self, other: &BinnedStats) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Contract(format!(
                "cannot merge stats over different grids: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.merge(b);
        }
        self.out_of_range_low += other.out_of_range_low;
        self.out_of_range_high += other.out_of_range_high;
        Ok(())
    }

    /// Freeze a copy of the current state; later records do not affect it.
    pub fn snapshot(&self, step: u64) -> StageSnapshot {
        StageSnapshot {
            step,
            stats: self.clone(),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.grid.n_bins
    }

    pub fn bin_count(&self, index: usize) -> u64 {
        self.bins[index].count
    }

    pub fn bin_mean(&self, index: usize) -> Option<f64> {
        self.bins[index].mean()
    }

    pub fn bin_variance(&self, index: usize) -> Option<f64> {
        self.bins[index].variance()
    }

    /// Total observations recorded, including clamped ones.
    pub fn total_records(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Observations that fell inside the grid.
    pub fn in_range_records(&self) -> u64 {
        self.total_records() - self.out_of_range_low - self.out_of_range_high
    }

    pub fn out_of_range_low(&self) -> u64 {
        self.out_of_range_low
    }

    pub fn out_of_range_high(&self) -> u64 {
        self.out_of_range_high
    }
}

/// A frozen copy of the accumulated stats at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot {
    pub step: u64,
    pub stats: BinnedStats,
}

/// Spread of per-bin loss variances: coefficient of variation (population
/// std over mean) across bins with at least two observations. Larger means
/// variance is more concentrated in a few noise regimes.
pub fn variance_concentration(stats: &BinnedStats) -> Result<f64> {
    let vars: Vec<f64> = (0..stats.n_bins())
        .filter_map(|i| stats.bin_variance(i))
        .collect();
    if vars.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "variance concentration needs >= 2 bins with >= 2 records, found {}",
            vars.len()
        )));
    }
    let mean = vars.iter().sum::<f64>() / vars.len() as f64;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = vars.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vars.len() as f64;
    Ok(var.sqrt() / mean)
}

/// One parsed row of a heatmap CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub step: u64,
    pub bin_index: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub count: u64,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
}

pub const HEATMAP_HEADER: &str = "step,bin_index,lambda_lo,lambda_hi,count,mean,variance";

/// Write snapshots as CSV, one row per (snapshot, bin).
///
/// Mean is empty for empty bins and variance is empty below two records.
pub fn export_heatmap(snapshots: &[StageSnapshot], path: &Path) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::Contract(
            "export_heatmap needs at least one snapshot".into(),
        ));
    }
    let mut out = String::new();
    out.push_str(HEATMAP_HEADER);
    out.push('\n');
    for snap in snapshots {
        for i in 0..snap.stats.n_bins() {
            let (lo, hi) = snap.stats.grid().edges(i);
            let mean = snap.stats.bin_mean(i).map(format_sig12).unwrap_or_default();
            let var = snap
                .stats
                .bin_variance(i)
                .map(format_sig12)
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                snap.step,
                i,
                format_sig12(lo),
                format_sig12(hi),
                snap.stats.bin_count(i),
                mean,
                var
            ));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a heatmap CSV written by [`export_heatmap`].
pub fn parse_heatmap(path: &Path) -> Result<Vec<HeatmapRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEATMAP_HEADER => {}
        other => {
            return Err(Error::Contract(format!(
                "unexpected heatmap header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Contract(format!(
                "heatmap line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Contract(format!("bad number {s:?}: {e}")))
        };
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s).map(Some)
            }
        };
        rows.push(HeatmapRow {
            step: fields[0]
                .parse()
                .map_err(|e| Error::Contract(format!("bad step: {e}")))?,
            bin_index: fields[1]
                .parse()
                .map_err(|e| Error::Contract(format!("bad bin index: {e}")))?,
            lambda_lo: parse_f(fields[2])?,
            lambda_hi: parse_f(fields[3])?,
            count: fields[4]
                .parse()
                .map_err(|e| Error::Contract(format!("bad count: {e}")))?,
            mean: parse_opt(fields[5])?,
            variance: parse_opt(fields[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::snr_domain::{draw_noise_level, SamplerSpec};
    use rand::Rng;

    fn lam(v: f64) -> LogSnr {
        LogSnr::new(v).unwrap()
    }

    fn grid4() -> BinGrid {
        BinGrid::new(-2.0, 2.0, 4).unwrap()
    }

    #[test]
    fn constant_values_have_zero_variance() {
        let mut stats = BinnedStats::new(grid4());
        for _ in 0..3 {
            stats.record(lam(0.5), 2.0);
        }
        assert_eq!(stats.bin_count(2), 3);
        assert_eq!(stats.bin_mean(2), Some(2.0));
        assert_eq!(stats.bin_variance(2), Some(0.0));
    }

    #[test]
    fn sample_variance_of_one_two_three() {
        let mut stats = BinnedStats::new(grid4());
        for v in [1.0, 2.0, 3.0] {
            stats.record(lam(-1.5), v);
        }
        assert_eq!(stats.bin_mean(0), Some(2.0));
        assert!((stats.bin_variance(0).unwrap() - 1.0).abs() < 1e-15);
    }

    fn two_pass(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut rng = substream(0, "telemetry-two-pass");
        let values: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut stats = BinnedStats::new(grid4());
        for &v in &values {
            stats.record(lam(0.1), v);
        }
        let (mean, var) = two_pass(&values);
        let rel_mean = (stats.bin_mean(2).unwrap() - mean).abs() / mean.abs();
        let rel_var = (stats.bin_variance(2).unwrap() - var).abs() / var.abs();
        assert!(rel_mean < 1e-9, "mean relative error {rel_mean}");
        assert!(rel_var < 1e-9, "variance relative error {rel_var}");
    }

    #[test]
    fn streaming_is_stable_under_large_offset() {
        // Values like 1e6 + small noise defeat naive sum-of-squares.
        let mut rng = substream(0, "telemetry-offset");
        let values: Vec<f64> = (0..10_000)
            .map(|_| 1.0e6 + rng.random_range(-0.5..0.5))
            .collect();
        let mut stats = BinnedStats::new(grid4());
        for &v in &values {
            stats.record(lam(0.1), v);
        }
        let (mean, var) = two_pass(&values);
        assert!((stats.bin_mean(2).unwrap() - mean).abs() / mean < 1e-9);
        assert!((stats.bin_variance(2).unwrap() - var).abs() / var < 1e-9);
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let mut stats = BinnedStats::new(grid4());
        stats.record(lam(-5.0), 1.0);
        stats.record(lam(9.0), 2.0);
        stats.record(lam(9.5), 4.0);
        stats.record(lam(0.0), 3.0);
        assert_eq!(stats.out_of_range_low(), 1);
        assert_eq!(stats.out_of_range_high(), 2);
        assert_eq!(stats.total_records(), 4);
        assert_eq!(stats.in_range_records(), 1);
        // Clamped values landed in the edge bins.
        assert_eq!(stats.bin_count(0), 1);
        assert_eq!(stats.bin_count(3), 2);
        // The grid endpoints themselves are in range.
        let mut stats = BinnedStats::new(grid4());
        stats.record(lam(-2.0), 1.0);
        stats.record(lam(2.0), 1.0);
        assert_eq!(stats.in_range_records(), 2);
        assert_eq!(stats.bin_count(0), 1);
        assert_eq!(stats.bin_count(3), 1);
    }

    #[test]
    fn count_conservation() {
        let mut rng = substream(0, "telemetry-conservation");
        let mut stats = BinnedStats::new(grid4());
        let total = 5000;
        for _ in 0..total {
            stats.record(lam(rng.random_range(-4.0..4.0)), rng.random_range(0.0..1.0));
        }
        assert_eq!(stats.total_records(), total);
        assert_eq!(
            stats.in_range_records() + stats.out_of_range_low() + stats.out_of_range_high(),
            total
        );
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut stats = BinnedStats::new(grid4());
        stats.record(lam(0.0), 1.0);
        let snap = stats.snapshot(10);
        stats.record(lam(0.0), 100.0);
        assert_eq!(snap.stats.bin_count(2), 1);
        assert_eq!(snap.stats.bin_mean(2), Some(1.0));
        assert_eq!(stats.bin_count(2), 2);
    }

    #[test]
    fn snapshot_counts_are_monotone_in_step() {
        let mut rng = substream(0, "telemetry-monotone");
        let mut stats = BinnedStats::new(grid4());
        let mut snaps = Vec::new();
        for step in [100u64, 200, 300] {
            for _ in 0..500 {
                stats.record(lam(rng.random_range(-2.0..2.0)), rng.random_range(0.0..1.0));
            }
            snaps.push(stats.snapshot(step));
        }
        for pair in snaps.windows(2) {
            assert!(pair[0].step < pair[1].step);
            for i in 0..4 {
                assert!(pair[0].stats.bin_count(i) <= pair[1].stats.bin_count(i));
            }
        }
    }

    #[test]
    fn empty_snapshot_has_no_statistics() {
        let stats = BinnedStats::new(grid4());
        let snap = stats.snapshot(0);
        for i in 0..4 {
            assert_eq!(snap.stats.bin_count(i), 0);
            assert_eq!(snap.stats.bin_mean(i), None);
            assert_eq!(snap.stats.bin_variance(i), None);
        }
    }

    #[test]
    fn merge_equals_concatenated_stream() {
        let mut rng = substream(0, "telemetry-merge");
        let draws: Vec<(f64, f64)> = (0..20_000)
            .map(|_| {
                (
                    rng.random_range(-3.0..3.0),
                    1.0e3 + rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let mut merged = BinnedStats::new(grid4());
        let mut second = BinnedStats::new(grid4());
        let mut reference = BinnedStats::new(grid4());
        for (i, &(l, v)) in draws.iter().enumerate() {
            reference.record(lam(l), v);
            if i < draws.len() / 2 {
                merged.record(lam(l), v);
            } else {
                second.record(lam(l), v);
            }
        }
        merged.merge(&second).unwrap();
        assert_eq!(merged.total_records(), reference.total_records());
        assert_eq!(merged.out_of_range_low(), reference.out_of_range_low());
        for i in 0..4 {
            assert_eq!(merged.bin_count(i), reference.bin_count(i));
            let (m1, m2) = (merged.bin_mean(i).unwrap(), reference.bin_mean(i).unwrap());
            assert!((m1 - m2).abs() / m2.abs() < 1e-9);
            let (v1, v2) = (
                merged.bin_variance(i).unwrap(),
                reference.bin_variance(i).unwrap(),
            );
            assert!((v1 - v2).abs() / v2.abs() < 1e-9, "bin {i}: {v1} vs {v2}");
        }
    }

    #[test]
    fn merge_rejects_mismatched_grids() {
        let mut a = BinnedStats::new(grid4());
        let b = BinnedStats::new(BinGrid::new(-2.0, 2.0, 8).unwrap());
        assert!(a.merge(&b).is_err());
    }

    #[test]
    fn variance_concentration_examples() {
        // All bins identical variance -> 0.
        let mut stats = BinnedStats::new(grid4());
        for i in 0..4 {
            let center = -1.5 + i as f64;
            for v in [1.0, 3.0] {
                stats.record(lam(center), v);
            }
        }
        assert_eq!(variance_concentration(&stats).unwrap(), 0.0);

        // Bin variances (1, 1, 4, 4) -> population CV = 1.5 / 2.5 = 0.6.
        let mut stats = BinnedStats::new(grid4());
        let spreads = [1.0f64, 1.0, 4.0, 4.0];
        for (i, s) in spreads.iter().enumerate() {
            let center = -1.5 + i as f64;
            let half = (s / 2.0).sqrt();
            for v in [-half, half] {
                stats.record(lam(center), 10.0 + v);
            }
        }
        let cv = variance_concentration(&stats).unwrap();
        assert!((cv - 0.6).abs() < 1e-12, "cv {cv}");

        // Scaling one bin's variance up strictly increases the statistic.
        let mut boosted = BinnedStats::new(grid4());
        let spreads = [1.0f64, 1.0, 4.0, 16.0];
        for (i, s) in spreads.iter().enumerate() {
            let center = -1.5 + i as f64;
            let half = (s / 2.0).sqrt();
            for v in [-half, half] {
                boosted.record(lam(center), 10.0 + v);
            }
        }
        assert!(variance_concentration(&boosted).unwrap() > cv);
    }

    #[test]
    fn variance_concentration_needs_two_qualifying_bins() {
        let mut stats = BinnedStats::new(grid4());
        stats.record(lam(0.1), 1.0);
        stats.record(lam(0.1), 2.0);
        assert!(matches!(
            variance_concentration(&stats),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn heatmap_row_count_and_partition() {
        let mut stats = BinnedStats::new(grid4());
        stats.record(lam(0.3), 1.0);
        let snap = stats.snapshot(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        export_heatmap(&[snap], &path).unwrap();

        let rows = parse_heatmap(&path).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].lambda_lo, -2.0);
        assert_eq!(rows[3].lambda_hi, 2.0);
        for pair in rows.windows(2) {
            assert_eq!(pair[0].lambda_hi, pair[1].lambda_lo);
        }
    }

    #[test]
    fn heatmap_round_trip_is_stable() {
        let mut rng = substream(0, "telemetry-roundtrip");
        let mut stats = BinnedStats::new(grid4());
        for _ in 0..1000 {
            stats.record(lam(rng.random_range(-2.0..2.0)), rng.random_range(0.0..5.0));
        }
        let snaps = [stats.snapshot(1), stats.snapshot(2)];
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.csv");
        export_heatmap(&snaps, &first).unwrap();
        let rows = parse_heatmap(&first).unwrap();

        // Parsed values match the snapshot to 12 significant digits.
        for row in &rows {
            let snap = &snaps[if row.step == 1 { 0 } else { 1 }];
            if let Some(mean) = snap.stats.bin_mean(row.bin_index) {
                let got = row.mean.unwrap();
                assert!((got - mean).abs() <= mean.abs() * 1e-11);
            } else {
                assert_eq!(row.mean, None);
            }
            if let Some(var) = snap.stats.bin_variance(row.bin_index) {
                let got = row.variance.unwrap();
                assert!((got - var).abs() <= var.abs() * 1e-11);
            } else {
                assert_eq!(row.variance, None);
            }
        }

        // Re-exporting the parsed values reproduces the file byte for byte.
        let mut out = String::new();
        out.push_str(HEATMAP_HEADER);
        out.push('\n');
        for row in &rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.step,
                row.bin_index,
                format_sig12(row.lambda_lo),
                format_sig12(row.lambda_hi),
                row.count,
                row.mean.map(format_sig12).unwrap_or_default(),
                row.variance.map(format_sig12).unwrap_or_default(),
            ));
        }
        let original = std::fs::read_to_string(&first).unwrap();
        assert_eq!(out, original);
    }

    #[test]
    fn export_requires_a_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_heatmap(&[], &dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn sampling_density_is_stable_across_run_halves() {
        // With a fixed sampler the per-bin count fractions of the first and
        // second half of a stream agree within 3 standard errors.
        let spec = SamplerSpec::default_log_normal();
        let grid = BinGrid::default_grid();
        let mut rng = substream(41, "density-stability");
        let mut halves = [BinnedStats::new(grid), BinnedStats::new(grid)];
        let per_half = 50_000u64;
        for half in &mut halves {
            for _ in 0..per_half {
                let draw = draw_noise_level(&spec, 0.5, &mut rng).unwrap();
                half.record(draw.lambda, 1.0);
            }
        }
        let n = per_half as f64;
        for i in 0..grid.n_bins {
            let f1 = halves[0].bin_count(i) as f64 / n;
            let f2 = halves[1].bin_count(i) as f64 / n;
            let pooled = (f1 + f2) / 2.0;
            if pooled == 0.0 {
                continue;
            }
            let se = (pooled * (1.0 - pooled) * (2.0 / n)).sqrt();
            assert!(
                (f1 - f2).abs() < 3.0 * se,
                "bin {i}: fractions {f1} vs {f2}, se {se}"
            );
        }
    }
}
