//! Posterior summaries and predictive inference.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{AgpError, Result};
use crate::linalg::{cholesky, log_sum_exp, pivoted_lowrank, se_cross_covariance, KernelMatrix, MarginalScale, WoodburyFactor};
use crate::model::{LikelihoodMode, ModelTarget, Target};
use crate::state::{ChainRecord, ComponentState, EnsembleState, InclusionVector};

/// Solver for `Sigma = I + K` in either likelihood mode.
enum SigmaSolver {
    Dense(Cholesky<f64, Dyn>),
    LowRank(WoodburyFactor),
}

impl SigmaSolver {
    fn new(k: DMatrix<f64>, mode: LikelihoodMode) -> Result<Self> {
        let n = k.nrows();
        match mode {
            LikelihoodMode::Dense => {
                let mut s = k;
                for i in 0..n {
                    s[(i, i)] += 1.0;
                }
                Ok(SigmaSolver::Dense(cholesky(s)?))
            }
            LikelihoodMode::LowRank { rank } => {
                let f = pivoted_lowrank(&KernelMatrix::new(k)?, rank.clamp(1, n.max(1)), 0.0)?;
                Ok(SigmaSolver::LowRank(WoodburyFactor::new(&f)?))
            }
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SigmaSolver::Dense(c) => Ok(c.solve(rhs)),
            SigmaSolver::LowRank(w) => w.solve(rhs),
        }
    }

    fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            SigmaSolver::Dense(c) => Ok(c.solve(rhs)),
            SigmaSolver::LowRank(w) => {
                let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
                for j in 0..rhs.ncols() {
                    out.set_column(j, &w.solve(&rhs.column(j).into_owned())?);
                }
                Ok(out)
            }
        }
    }
}

/// Shape and rate of the conditional `sigma^2 | y, xi ~ IG(a + n/2, b + q/2)`.
pub fn sigma2_posterior(n: usize, q: f64, scale: &MarginalScale) -> (f64, f64) {
    (scale.a() + n as f64 / 2.0, scale.b() + q / 2.0)
}

/// Draw from `IG(shape, rate)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0)
        .map_err(|e| AgpError::InvalidParameter(format!("inverse gamma shape {shape}: {e}")))?;
    Ok(rate / g.sample(rng))
}

/// `sigma^2 ~ IG(a + n/2, b + y' Sigma^-1 y / 2)` at the current state.
pub fn sample_sigma2<R: Rng + ?Sized>(
    target: &ModelTarget,
    state: &EnsembleState,
    rng: &mut R,
) -> Result<f64> {
    let k = target.kernel_sum(state.components(), &[])?;
    let solver = SigmaSolver::new(k, target.mode())?;
    let q = target.y().dot(&solver.solve(target.y())?);
    let (shape, rate) = sigma2_posterior(target.n(), q, target.scale());
    sample_inverse_gamma(shape, rate, rng)
}

/// Mean and covariance (per unit `sigma^2`) of `f_l | y, xi`:
/// `S_l Sigma^-1 y` and `S_l - S_l Sigma^-1 S_l` with `S_l = rho_l^2 C_l`.
pub fn component_f_moments(
    target: &ModelTarget,
    state: &EnsembleState,
    l: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = target.n();
    let c = state.component(l);
    if c.cell.is_null() {
        return Ok((DVector::zeros(n), DMatrix::zeros(n, n)));
    }
    let rho = target.grid().rho(c.cell);
    let s_l = target.kernel(&c.gamma, target.grid().lambda(c.cell))?.into_inner() * (rho * rho);
    let k = target.kernel_sum(state.components(), &[])?;
    let solver = SigmaSolver::new(k, LikelihoodMode::Dense)?;
    let mean = &s_l * solver.solve(target.y())?;
    let cov = &s_l - &s_l * solver.solve_matrix(&s_l)?;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    jitter: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = mean.len();
    let mut eps = jitter;
    for _ in 0..8 {
        let mut c = cov.clone();
        for i in 0..n {
            c[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(c) {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            return Ok(mean + ch.l() * z);
        }
        eps *= 10.0;
    }
    Err(AgpError::NotPositiveDefinite("component posterior covariance".into()))
}

/// Draw of `f_l | sigma^2, y, xi`; the zero vector when `rho_l = 0`.
pub fn sample_component_f<R: Rng + ?Sized>(
    target: &ModelTarget,
    state: &EnsembleState,
    l: usize,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let c = state.component(l);
    if c.cell.is_null() {
        return Ok(DVector::zeros(target.n()));
    }
    let rho = target.grid().rho(c.cell);
    let (mean, cov) = component_f_moments(target, state, l)?;
    sample_mvn(&mean, &(cov * sigma2), 1e-8 * rho * rho * sigma2, rng)
}

/// Pointwise predictive summaries on the original response scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Conditional mean and variance (per unit `sigma^2`) of `f(x*)` for one
/// configuration of signal components `(gamma, rho, lambda)`.
fn predictive_moments(
    target: &ModelTarget,
    comps: &[(InclusionVector, f64, f64)],
    x_star: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = x_star.nrows();
    let n = target.n();
    let mut k = DMatrix::zeros(n, n);
    let mut cross = DMatrix::zeros(m, n);
    let mut prior_var = 0.0;
    for (gamma, rho, lambda) in comps {
        let r2 = rho * rho;
        k += target.kernel(gamma, *lambda)?.values() * r2;
        cross += se_cross_covariance(x_star, target.x(), gamma, *lambda)? * r2;
        prior_var += r2;
    }
    let solver = SigmaSolver::new(k, target.mode())?;
    let alpha = solver.solve(target.y())?;
    let mean = &cross * alpha;
    let w = solver.solve_matrix(&cross.transpose())?;
    let var = DVector::from_fn(m, |i, _| (prior_var - cross.row(i).dot(&w.column(i).transpose())).max(0.0));
    Ok((mean, var))
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior predictive mean and 95% pointwise bands for `f` at standardized
/// inputs `x_star`, averaged over `records`.
///
/// Each record contributes one draw of `f(x*)` from its conditional Gaussian
/// given `(gamma, rho, lambda, sigma^2)`; the point prediction averages the
/// conditional means.
pub fn predict<R: Rng + ?Sized>(
    target: &ModelTarget,
    records: &[&ChainRecord],
    x_star: &DMatrix<f64>,
    stats: &Standardization,
    rng: &mut R,
) -> Result<Prediction> {
    if records.is_empty() {
        return Err(AgpError::EmptyInput("no retained chain records".into()));
    }
    if x_star.ncols() != target.p() {
        return Err(AgpError::DimensionMismatch(format!(
            "prediction inputs have {} columns, training data {}",
            x_star.ncols(),
            target.p()
        )));
    }
    let p = target.p();
    let mut keys: BTreeMap<Vec<(Vec<usize>, u64, u64)>, usize> = BTreeMap::new();
    let mut configs: Vec<Vec<(InclusionVector, f64, f64)>> = Vec::new();
    let mut which = Vec::with_capacity(records.len());
    for r in records {
        let comps = r.signal_components(p)?;
        let key = comps
            .iter()
            .map(|(g, rho, lambda)| (g.indices(), rho.to_bits(), lambda.to_bits()))
            .collect();
        let idx = *keys.entry(key).or_insert_with(|| {
            configs.push(comps);
            configs.len() - 1
        });
        which.push(idx);
    }
    let moments = configs
        .par_iter()
        .map(|c| predictive_moments(target, c, x_star))
        .collect::<Result<Vec<_>>>()?;
    let m = x_star.nrows();
    let mut mean = DVector::zeros(m);
    let mut draws = vec![Vec::with_capacity(records.len()); m];
    for (r, &idx) in records.iter().zip(&which) {
        let (mu, var) = &moments[idx];
        let sigma2 = r.sigma2.unwrap_or(1.0);
        mean += mu;
        for i in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            draws[i].push(mu[i] + (sigma2 * var[i]).sqrt() * z);
        }
    }
    mean /= records.len() as f64;
    let mut lower = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m);
    for d in &mut draws {
        d.sort_by(|a, b| a.total_cmp(b));
        lower.push(stats.destandardize_y(quantile_sorted(d, 0.025)));
        upper.push(stats.destandardize_y(quantile_sorted(d, 0.975)));
    }
    Ok(Prediction {
        mean: mean.iter().map(|&v| stats.destandardize_y(v)).collect(),
        lower,
        upper,
    })
}

/// Fraction of records in which each predictor appears in some component.
pub fn marginal_inclusion(records: &[&ChainRecord], p: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(AgpError::EmptyInput("no retained chain records".into()));
    }
    let mut counts = vec![0usize; p];
    for r in records {
        let mut seen = vec![false; p];
        for c in &r.components {
            for &j in &c.gamma {
                if j == 0 || j > p {
                    return Err(AgpError::Data(format!("predictor index {j} outside 1..={p}")));
                }
                seen[j - 1] = true;
            }
        }
        for (cnt, s) in counts.iter_mut().zip(seen) {
            *cnt += s as usize;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / records.len() as f64).collect())
}

/// Co-appearance graph over the most frequently included predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    /// 0-based predictor indices, ascending.
    pub nodes: Vec<usize>,
    /// `(j, k, weight)` with `j < k`, both in `nodes`, weight > 0.
    pub edges: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

impl InteractionGraph {
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        let (a, b) = if j < k { (j, k) } else { (k, j) };
        self.edges
            .iter()
            .find(|e| e.0 == a && e.1 == b)
            .map_or(0.0, |e| e.2)
    }
}

/// Interaction graph thresholded at the `(1 - q/p)` quantile of marginal
/// inclusion. With `signal_only`, components with `rho = 0` are ignored when
/// counting co-appearances.
pub fn interaction_graph(
    records: &[&ChainRecord],
    p: usize,
    q: usize,
    signal_only: bool,
) -> Result<InteractionGraph> {
    if q > p {
        return Err(AgpError::InvalidParameter(format!("q = {q} exceeds p = {p}")));
    }
    let incl = marginal_inclusion(records, p)?;
    let mut sorted = incl.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let threshold = quantile_sorted(&sorted, 1.0 - q as f64 / p as f64);
    let nodes: Vec<usize> = (0..p).filter(|&j| incl[j] > 0.0 && incl[j] >= threshold).collect();
    let mut pos = vec![usize::MAX; p];
    for (i, &j) in nodes.iter().enumerate() {
        pos[j] = i;
    }
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for r in records {
        let mut pairs = Vec::new();
        for c in &r.components {
            if signal_only && c.rho <= 0.0 {
                continue;
            }
            let members: Vec<usize> = c
                .gamma
                .iter()
                .map(|&j| j - 1)
                .filter(|&j| pos[j] != usize::MAX)
                .collect();
            for a in 0..members.len() {
                for b in a + 1..members.len() {
                    let (x, y) = (members[a].min(members[b]), members[a].max(members[b]));
                    pairs.push((x, y));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        for pr in pairs {
            *counts.entry(pr).or_default() += 1;
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = counts
        .into_iter()
        .map(|((j, k), c)| (j, k, c as f64 / records.len() as f64))
        .collect();
    edges.sort_by_key(|e| (e.0, e.1));
    Ok(InteractionGraph {
        nodes,
        edges,
        threshold,
    })
}

/// `rho_l^2 / (1 + sum_{s in I_A} rho_s^2)` for each component (zero when
/// inactive).
pub fn variance_explained(record: &ChainRecord) -> Vec<f64> {
    let total: f64 = record.active.iter().map(|&l| record.components[l].rho.powi(2)).sum();
    let mut out = vec![0.0; record.components.len()];
    for &l in &record.active {
        out[l] = record.components[l].rho.powi(2) / (1.0 + total);
    }
    out
}

/// Posterior probabilities of a fixed set of configurations.
///
/// For each configuration the scales are sampled by `iterations` griddy-Gibbs
/// sweeps and the conditional scores `pi(gamma | rho, lambda, y)` are averaged;
/// the averages are normalized over the set. Each configuration's chain starts
/// from the same seed.
pub fn model_scores<T: Target>(
    target: &T,
    configurations: &[Vec<InclusionVector>],
    tau: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if configurations.is_empty() {
        return Err(AgpError::EmptyInput("no configurations to score".into()));
    }
    let iterations = iterations.max(1);
    let mut log_scores = Vec::with_capacity(configurations.len());
    for config in configurations {
        let comps: Vec<ComponentState> = config
            .iter()
            .map(|g| ComponentState::new(g.clone(), target.grid().cell(target.grid().n_cells() - 1)))
            .collect();
        let mut state = EnsembleState::with_components(comps, tau)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            for l in 0..config.len() {
                crate::sampler::griddy_gibbs_scales(target, &mut state, l, &mut rng)?;
            }
            draws.push(target.log_joint(&state)? - scale_prior(target, &state));
        }
        log_scores.push(log_sum_exp(&draws) - (iterations as f64).ln());
    }
    let norm = log_sum_exp(&log_scores);
    Ok(log_scores.iter().map(|s| (s - norm).exp()).collect())
}

fn scale_prior<T: Target>(target: &T, state: &EnsembleState) -> f64 {
    state
        .components()
        .iter()
        .map(|c| target.grid().log_cell_prior(c.cell))
        .sum()
}

/// Summary statistics of a retained chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub marginal_inclusion: Vec<f64>,
    pub sigma2_trace: Vec<f64>,
    /// Counts of records by `|I_A|`.
    pub active_count_hist: Vec<usize>,
    /// Counts of records by number of non-empty components.
    pub nonempty_count_hist: Vec<usize>,
    /// Posterior mean variance explained per component.
    pub variance_explained: Vec<f64>,
}

impl PosteriorSummary {
    pub fn from_records(records: &[&ChainRecord], p: usize) -> Result<Self> {
        let marginal_inclusion = marginal_inclusion(records, p)?;
        let k = records[0].components.len();
        let mut active_count_hist = vec![0; k + 1];
        let mut nonempty_count_hist = vec![0; k + 1];
        let mut ve = vec![0.0; k];
        for r in records {
            active_count_hist[r.active.len().min(k)] += 1;
            let nonempty = r.components.iter().filter(|c| !c.gamma.is_empty()).count();
            nonempty_count_hist[nonempty.min(k)] += 1;
            for (acc, v) in ve.iter_mut().zip(variance_explained(r)) {
                *acc += v;
            }
        }
        for v in &mut ve {
            *v /= records.len() as f64;
        }
        Ok(Self {
            marginal_inclusion,
            sigma2_trace: records.iter().filter_map(|r| r.sigma2).collect(),
            active_count_hist,
            nonempty_count_hist,
            variance_explained: ve,
        })
    }

    pub fn sigma2_mean(&self) -> Option<f64> {
        if self.sigma2_trace.is_empty() {
            None
        } else {
            Some(self.sigma2_trace.iter().sum::<f64>() / self.sigma2_trace.len() as f64)
        }
    }
}
