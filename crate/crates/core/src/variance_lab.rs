//! Exactly verifiable importance sampling on discrete log-SNR populations.
//!
//! A [`DiscretePopulation`] is a finite lambda grid with a base probability
//! q, a conditional mean m(lambda) and a conditional variance v(lambda) of a
//! scalar gradient surrogate g. On such populations every quantity of
//! interest is computable in closed form:
//!
//! - the law of total variance `Var(g) = E[v] + Var(m)`,
//! - the exact variance of the importance-weighted sample mean
//!   `(1/n) * sum (q/p) * g` under a proposal p,
//! - the variance-optimal proposal, both as `q * sqrt(v)` (the conditional
//!   standard deviation rule with the base measure made explicit) and as
//!   `q * sqrt(v + m^2)` (the exact minimizer of the estimator variance),
//!
//! and the optimality claim itself can be checked by brute force against an
//! exhaustive simplex lattice of proposals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-12;

/// A finite lambda grid with base probabilities and conditional moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePopulation {
    lambdas: Vec<f64>,
    base_prob: Vec<f64>,
    cond_mean: Vec<f64>,
    cond_var: Vec<f64>,
}

impl DiscretePopulation {
    pub fn new(
        lambdas: Vec<f64>,
        base_prob: Vec<f64>,
        cond_mean: Vec<f64>,
        cond_var: Vec<f64>,
    ) -> Result<Self> {
        let k = lambdas.len();
        if k == 0 || base_prob.len() != k || cond_mean.len() != k || cond_var.len() != k {
            return Err(Error::Contract(format!(
                "population fields must share one nonzero length, got {k}/{}/{}/{}",
                base_prob.len(),
                cond_mean.len(),
                cond_var.len()
            )));
        }
        for window in {
            let mut sorted = lambdas.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted
        }
        .windows(2)
        {
            if window[0] == window[1] {
                return Err(Error::Contract(format!(
                    "grid points must be distinct, {} repeats",
                    window[0]
                )));
            }
        }
        let sum: f64 = base_prob.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || base_prob.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::Contract(format!(
                "base_prob must be nonnegative and sum to 1 within {PROB_SUM_TOL}, sum = {sum}"
            )));
        }
        if cond_var.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Contract("conditional variances must be >= 0".into()));
        }
        Ok(Self {
            lambdas,
            base_prob,
            cond_mean,
            cond_var,
        })
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn base_prob(&self) -> &[f64] {
        &self.base_prob
    }

    pub fn cond_mean(&self) -> &[f64] {
        &self.cond_mean
    }

    pub fn cond_var(&self) -> &[f64] {
        &self.cond_var
    }

    /// The estimation target `E[g] = sum q * m`.
    pub fn target(&self) -> f64 {
        self.base_prob
            .iter()
            .zip(&self.cond_mean)
            .map(|(q, m)| q * m)
            .sum()
    }

    /// The base distribution viewed as a proposal.
    pub fn base_proposal(&self) -> Proposal {
        Proposal {
            probs: self.base_prob.clone(),
        }
    }

    fn check_absolute_continuity(&self, prop: &Proposal) -> Result<()> {
        for (i, (&q, &p)) in self.base_prob.iter().zip(&prop.probs).enumerate() {
            if q > 0.0 && p == 0.0 {
                return Err(Error::AbsoluteContinuity(format!(
                    "proposal is zero at grid point {i} where base probability is {q}"
                )));
            }
        }
        Ok(())
    }
}

/// A sampling distribution over the same grid as a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    probs: Vec<f64>,
}

impl Proposal {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || probs.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::Contract(format!(
                "proposal must be nonnegative and sum to 1 within {PROB_SUM_TOL}, sum = {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Within/between/total split of the gradient surrogate's variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    /// Expected conditional variance `sum q * v`.
    pub within: f64,
    /// Variance of the conditional mean `sum q * m^2 - (sum q * m)^2`.
    pub between: f64,
    pub total: f64,
}

/// Law-of-total-variance split for a population.
pub fn total_variance_decompose(pop: &DiscretePopulation) -> VarianceDecomposition {
    let within: f64 = pop
        .base_prob
        .iter()
        .zip(&pop.cond_var)
        .map(|(q, v)| q * v)
        .sum();
    let mean: f64 = pop.target();
    let second: f64 = pop
        .base_prob
        .iter()
        .zip(&pop.cond_mean)
        .map(|(q, m)| q * m * m)
        .sum();
    let between = second - mean * mean;
    VarianceDecomposition {
        within,
        between,
        total: within + between,
    }
}

/// Exact variance of the importance-weighted sample mean of g over n draws
/// from `prop`:
///
/// ```text
/// Var = (1/n) * [ sum q^2 * (v + m^2) / p  -  (sum q * m)^2 ]
/// ```
pub fn estimator_variance(pop: &DiscretePopulation, prop: &Proposal, n: u64) -> Result<f64> {
    if prop.probs.len() != pop.len() {
        return Err(Error::Contract(format!(
            "proposal has {} entries for a {}-point grid",
            prop.probs.len(),
            pop.len()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("estimator variance needs n >= 1".into()));
    }
    pop.check_absolute_continuity(prop)?;
    let mut second_moment = 0.0;
    for i in 0..pop.len() {
        let q = pop.base_prob[i];
        if q == 0.0 {
            continue;
        }
        let m = pop.cond_mean[i];
        let v = pop.cond_var[i];
        second_moment += q * q * (v + m * m) / prop.probs[i];
    }
    let target = pop.target();
    Ok((second_moment - target * target) / n as f64)
}

/// Which second-moment rule defines the optimal proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    /// `p* proportional to q * sqrt(v)`: the conditional-standard-deviation
    /// rule with the base measure made explicit. Exact when m = 0.
    CondStd,
    /// `p* proportional to q * sqrt(v + m^2)`: minimizes the estimator
    /// variance for any conditional mean.
    FullSecondMoment,
}

/// The variance-optimal proposal under the chosen mode.
pub fn optimal_proposal(pop: &DiscretePopulation, mode: ProposalMode) -> Result<Proposal> {
    let weights: Vec<f64> = (0..pop.len())
        .map(|i| {
            let root = match mode {
                ProposalMode::CondStd => pop.cond_var[i].sqrt(),
                ProposalMode::FullSecondMoment => {
                    (pop.cond_var[i] + pop.cond_mean[i] * pop.cond_mean[i]).sqrt()
                }
            };
            pop.base_prob[i] * root
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::DegeneratePopulation(
            "all optimal-proposal weights are zero".into(),
        ));
    }
    Proposal::new(weights.iter().map(|w| w / total).collect())
}

/// Largest grid for which the exhaustive simplex search is enabled.
pub const MAX_BRUTE_FORCE_GRID: usize = 4;

/// Default lattice resolution per grid size, balancing the combinatorial
/// budget of `C(resolution + k - 1, k - 1)` lattice points.
pub fn default_resolution(grid_len: usize) -> usize {
    match grid_len {
        0..=2 => 1000,
        3 => 100,
        _ => 40,
    }
}

/// Outcome of the brute-force optimality check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub resolution: usize,
    pub lattice_points_searched: usize,
    /// Best proposal found on the simplex lattice.
    pub lattice_minimizer: Vec<f64>,
    pub lattice_min_variance: f64,
    /// The FullSecondMoment proposal and its exact variance.
    pub analytic_proposal: Vec<f64>,
    pub analytic_variance: f64,
    /// Variance under the base distribution, for reference.
    pub base_variance: f64,
    /// Whether the analytic proposal attains the lattice minimum
    /// within discretization slack.
    pub holds: bool,
}

/// Enumerate every proposal on the simplex lattice (entries in multiples of
/// 1/resolution), evaluate the exact estimator variance for each, and check
/// that the FullSecondMoment proposal is at least as good as the lattice
/// minimizer.
///
/// Lattice points that violate absolute continuity have infinite variance
/// and are skipped. Grids larger than [`MAX_BRUTE_FORCE_GRID`] are rejected.
pub fn verify_optimality(pop: &DiscretePopulation, resolution: usize) -> Result<OptimalityReport> {
    if pop.len() > MAX_BRUTE_FORCE_GRID {
        return Err(Error::UnsupportedSize {
            got: pop.len(),
            max: MAX_BRUTE_FORCE_GRID,
        });
    }
    if resolution == 0 {
        return Err(Error::Contract("lattice resolution must be >= 1".into()));
    }

    let analytic = optimal_proposal(pop, ProposalMode::FullSecondMoment)?;
    let analytic_variance = estimator_variance(pop, &analytic, 1)?;
    let base_variance = estimator_variance(pop, &pop.base_proposal(), 1)?;

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut searched = 0usize;
    let mut counts = vec![0usize; pop.len()];
    enumerate_compositions(resolution, pop.len(), &mut counts, 0, &mut |counts| {
        searched += 1;
        let probs: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 / resolution as f64)
            .collect();
        // Infinite variance wherever the proposal misses base support.
        for (i, &p) in probs.iter().enumerate() {
            if pop.base_prob[i] > 0.0 && p == 0.0 {
                return;
            }
        }
        let prop = Proposal {
            probs: probs.clone(),
        };
        let var = estimator_variance(pop, &prop, 1).expect("absolute continuity checked");
        match &best {
            Some((_, current)) if *current <= var => {}
            _ => best = Some((probs, var)),
        }
    });

    let (lattice_minimizer, lattice_min_variance) = best.ok_or_else(|| {
        Error::DegeneratePopulation("no lattice proposal satisfies absolute continuity".into())
    })?;

    // The lattice is a subset of the simplex, so a true optimum can only be
    // at or below the lattice minimum; equality slack covers rounding.
    let slack = 1e-12 * lattice_min_variance.abs().max(1.0);
    let holds = analytic_variance <= lattice_min_variance + slack;

    Ok(OptimalityReport {
        resolution,
        lattice_points_searched: searched,
        lattice_minimizer,
        lattice_min_variance,
        analytic_proposal: analytic.probs,
        analytic_variance,
        base_variance,
        holds,
    })
}

fn enumerate_compositions(
    remaining: usize,
    slots: usize,
    counts: &mut [usize],
    slot: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if slot + 1 == slots {
        counts[slot] = remaining;
        visit(counts);
        return;
    }
    for take in 0..=remaining {
        counts[slot] = take;
        enumerate_compositions(remaining - take, slots, counts, slot + 1, visit);
    }
}

/// Draw n grid points from the proposal, draw `g ~ Normal(m, sqrt(v))` at
/// each, and return the importance-weighted sample mean `(1/n) sum (q/p) g`.
pub fn importance_estimate<R: Rng>(
    pop: &DiscretePopulation,
    prop: &Proposal,
    n: u64,
    rng: &mut R,
) -> Result<f64> {
    if prop.probs.len() != pop.len() {
        return Err(Error::Contract(format!(
            "proposal has {} entries for a {}-point grid",
            prop.probs.len(),
            pop.len()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("importance estimate needs n >= 1".into()));
    }
    pop.check_absolute_continuity(prop)?;
    let mut sum = 0.0;
    for _ in 0..n {
        let i = sample_index(&prop.probs, rng);
        let g = if pop.cond_var[i] > 0.0 {
            Normal::new(pop.cond_mean[i], pop.cond_var[i].sqrt())
                .expect("validated variance")
                .sample(rng)
        } else {
            pop.cond_mean[i]
        };
        sum += pop.base_prob[i] / prop.probs[i] * g;
    }
    Ok(sum / n as f64)
}

/// Exact expectation of [`importance_estimate`], evaluated by enumerating
/// grid points the way the estimator would weight them. Unbiasedness means
/// this equals the population target for every valid proposal.
pub fn expected_importance_estimate(pop: &DiscretePopulation, prop: &Proposal) -> Result<f64> {
    pop.check_absolute_continuity(prop)?;
    let mut expectation = 0.0;
    for i in 0..pop.len() {
        if prop.probs[i] == 0.0 {
            continue;
        }
        expectation += prop.probs[i] * (pop.base_prob[i] / prop.probs[i]) * pop.cond_mean[i];
    }
    Ok(expectation)
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
