//! Scale grids, inclusion priors and move-probability schedules.
//!
//! Covariance scales live on a discrete grid `S_rho x S_lambda`. Grid points are
//! elicited on the standardized scale: `rho` from a target fraction of explained
//! variance `R^2 = rho^2 / (1 + rho^2)`, and `lambda` from a target kernel
//! correlation `c = exp(-0.01 lambda^2)` between points at distance 0.1.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{AgpError, Result};
use crate::state::{EnsembleState, InclusionVector};

/// Default explained-variance targets for the `rho` grid.
pub const DEFAULT_R2_TARGETS: [f64; 6] = [0.0, 0.25, 0.50, 0.70, 0.85, 0.99];
/// Default correlation-at-distance-0.1 targets for the `lambda` grid.
pub const DEFAULT_CORRELATION_TARGETS: [f64; 5] = [0.70, 0.80, 0.88, 0.94, 0.99];

/// Signal-to-noise ratio whose explained variance fraction is `r2`.
pub fn rho_for_r2(r2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r2) {
        return Err(AgpError::InvalidParameter(format!(
            "R^2 target {r2} outside [0, 1)"
        )));
    }
    Ok((r2 / (1.0 - r2)).sqrt())
}

/// Inverse length-scale giving correlation `c` at distance 0.1.
pub fn lambda_for_correlation(c: f64) -> Result<f64> {
    if !(c > 0.0 && c < 1.0) {
        return Err(AgpError::InvalidParameter(format!(
            "correlation target {c} outside (0, 1)"
        )));
    }
    Ok(10.0 * (-c.ln()).sqrt())
}

/// Index of one cell of the scale grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub rho: usize,
    pub lambda: usize,
}

impl GridCell {
    pub fn new(rho: usize, lambda: usize) -> Self {
        Self { rho, lambda }
    }

    /// `rho == 0` is always the first grid point.
    pub fn is_null(&self) -> bool {
        self.rho == 0
    }
}

/// Discrete priors for the covariance scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    rho_values: Vec<f64>,
    rho_weights: Vec<f64>,
    lambda_values: Vec<f64>,
    lambda_weights: Vec<f64>,
    alpha: f64,
    beta: f64,
}

impl GridSpec {
    /// Builds a grid with weights `(1 + rho)^-alpha` and `exp(-beta lambda)`.
    pub fn new(rho_values: Vec<f64>, lambda_values: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if rho_values.is_empty() || lambda_values.is_empty() {
            return Err(AgpError::InvalidParameter("empty scale grid".into()));
        }
        if rho_values[0] != 0.0 {
            return Err(AgpError::InvalidParameter(
                "rho grid must start at 0".into(),
            ));
        }
        if !strictly_increasing(&rho_values) || !strictly_increasing(&lambda_values) {
            return Err(AgpError::InvalidParameter(
                "grid values must be finite and strictly increasing".into(),
            ));
        }
        if lambda_values[0] <= 0.0 {
            return Err(AgpError::InvalidParameter(
                "lambda grid must be positive".into(),
            ));
        }
        if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
            return Err(AgpError::InvalidParameter(format!(
                "grid weight exponents must be nonnegative (alpha={alpha}, beta={beta})"
            )));
        }
        let rho_weights = normalize_log_weights(
            rho_values.iter().map(|r| -alpha * (1.0 + r).ln()),
        );
        let lambda_weights = normalize_log_weights(lambda_values.iter().map(|l| -beta * l));
        Ok(Self {
            rho_values,
            rho_weights,
            lambda_values,
            lambda_weights,
            alpha,
            beta,
        })
    }

    /// Grid from explained-variance and correlation targets.
    pub fn from_targets(r2: &[f64], correlations: &[f64], alpha: f64, beta: f64) -> Result<Self> {
        let rho = r2.iter().map(|&t| rho_for_r2(t)).collect::<Result<Vec<_>>>()?;
        let mut lambda = correlations
            .iter()
            .map(|&c| lambda_for_correlation(c))
            .collect::<Result<Vec<_>>>()?;
        // higher correlation means smaller lambda
        lambda.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self::new(rho, lambda, alpha, beta)
    }

    pub fn rho_values(&self) -> &[f64] {
        &self.rho_values
    }
    pub fn rho_weights(&self) -> &[f64] {
        &self.rho_weights
    }
    pub fn lambda_values(&self) -> &[f64] {
        &self.lambda_values
    }
    pub fn lambda_weights(&self) -> &[f64] {
        &self.lambda_weights
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_rho(&self) -> usize {
        self.rho_values.len()
    }
    pub fn n_lambda(&self) -> usize {
        self.lambda_values.len()
    }

    /// `|S_rho| * |S_lambda|`.
    pub fn n_cells(&self) -> usize {
        self.n_rho() * self.n_lambda()
    }

    /// Cells are laid out rho-major.
    pub fn cell(&self, index: usize) -> GridCell {
        GridCell::new(index / self.n_lambda(), index % self.n_lambda())
    }

    pub fn cell_index(&self, cell: GridCell) -> usize {
        cell.rho * self.n_lambda() + cell.lambda
    }

    pub fn contains(&self, cell: GridCell) -> bool {
        cell.rho < self.n_rho() && cell.lambda < self.n_lambda()
    }

    pub fn rho(&self, cell: GridCell) -> f64 {
        self.rho_values[cell.rho]
    }

    pub fn lambda(&self, cell: GridCell) -> f64 {
        self.lambda_values[cell.lambda]
    }

    pub fn log_cell_prior(&self, cell: GridCell) -> f64 {
        self.rho_weights[cell.rho].ln() + self.lambda_weights[cell.lambda].ln()
    }

    /// Locates a `(rho, lambda)` pair on the grid by exact value.
    pub fn find_cell(&self, rho: f64, lambda: f64) -> Option<GridCell> {
        let r = self.rho_values.iter().position(|&v| v == rho)?;
        let l = self.lambda_values.iter().position(|&v| v == lambda)?;
        Some(GridCell::new(r, l))
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

fn normalize_log_weights(logw: impl Iterator<Item = f64>) -> Vec<f64> {
    let logw: Vec<f64> = logw.collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Default grids: `R^2` targets {0, .25, .5, .7, .85, .99}, correlation targets
/// {.70, .80, .88, .94, .99} and uniform weights (`alpha = beta = 0`).
pub fn default_grids() -> GridSpec {
    GridSpec::from_targets(&DEFAULT_R2_TARGETS, &DEFAULT_CORRELATION_TARGETS, 0.0, 0.0)
        .expect("default grid targets are valid")
}

/// Beta-binomial prior on inclusion vectors: `tau ~ Beta(omega nu, (1 - omega) nu)`
/// with `omega = d*/p` and `nu = p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionPrior {
    d_star: f64,
    p: usize,
}

impl InclusionPrior {
    pub fn new(d_star: f64, p: usize) -> Result<Self> {
        if !(d_star > 0.0 && d_star < p as f64) {
            return Err(AgpError::InvalidParameter(format!(
                "expected component size d* = {d_star} must lie in (0, p = {p})"
            )));
        }
        Ok(Self { d_star, p })
    }

    pub fn d_star(&self) -> f64 {
        self.d_star
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn omega(&self) -> f64 {
        self.d_star / self.p as f64
    }
    pub fn nu(&self) -> f64 {
        self.p as f64
    }

    /// Standard Beta parameters of the hyper-prior on `tau`.
    pub fn beta_params(&self) -> (f64, f64) {
        (self.omega() * self.nu(), (1.0 - self.omega()) * self.nu())
    }

    /// Conditional Beta parameters of `tau` given `k_a` active components
    /// holding `total_size` predictors in all.
    ///
    /// `nu' = (1 + k_a) p`, `mu' = (d* + total_size) / nu'`.
    pub fn tau_posterior(&self, k_active: usize, total_size: usize) -> (f64, f64) {
        let nu = (1 + k_active) as f64 * self.p as f64;
        let mu = (self.d_star + total_size as f64) / nu;
        (mu * nu, (1.0 - mu) * nu)
    }
}

/// `log pi(gamma | tau) = |gamma| log tau + (p - |gamma|) log(1 - tau)`.
pub fn log_inclusion_prior(gamma: &InclusionVector, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(AgpError::InvalidParameter(format!(
            "inclusion probability {tau} outside (0, 1)"
        )));
    }
    let d = gamma.size() as f64;
    let p = gamma.len() as f64;
    Ok(d * tau.ln() + (p - d) * (1.0 - tau).ln())
}

/// Draws `tau` from its Beta full conditional given the active components.
pub fn sample_tau<R: Rng + ?Sized>(
    state: &EnsembleState,
    prior: &InclusionPrior,
    rng: &mut R,
) -> Result<f64> {
    let k_a = state.k_active();
    let total: usize = state
        .active()
        .iter()
        .map(|&l| state.components()[l].gamma.size())
        .sum();
    let (a, b) = prior.tau_posterior(k_a, total);
    let dist = Beta::new(a, b)
        .map_err(|e| AgpError::InvalidParameter(format!("Beta({a}, {b}): {e}")))?;
    let tau: f64 = dist.sample(rng);
    Ok(tau.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// Move kinds of the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoveKind {
    Add,
    Remove,
    Swap,
    CrossDonate,
    PairedDonate,
    PairedSwap,
}

impl MoveKind {
    pub const ALL: [MoveKind; 6] = [
        MoveKind::Add,
        MoveKind::Remove,
        MoveKind::Swap,
        MoveKind::CrossDonate,
        MoveKind::PairedDonate,
        MoveKind::PairedSwap,
    ];

    /// The move whose neighborhood contains the origin after this move.
    pub fn paired_reverse(self) -> MoveKind {
        match self {
            MoveKind::Add => MoveKind::Remove,
            MoveKind::Remove => MoveKind::Add,
            other => other,
        }
    }

    pub fn is_inter_component(self) -> bool {
        matches!(
            self,
            MoveKind::CrossDonate | MoveKind::PairedDonate | MoveKind::PairedSwap
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            MoveKind::Add => "add",
            MoveKind::Remove => "remove",
            MoveKind::Swap => "swap",
            MoveKind::CrossDonate => "cross-donate",
            MoveKind::PairedDonate => "paired-donate",
            MoveKind::PairedSwap => "paired-swap",
        }
    }
}

/// Parameters of the size-dependent Add/Remove/Swap probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveSchedule {
    /// Rate of the exponential density driving Add moves.
    pub lambda_add: f64,
    /// Mean of the Poisson density driving Swap moves.
    pub lambda_swap: f64,
    /// Interaction size where the Swap density is normalized.
    pub d_bar: usize,
    /// Probability mass always left for Remove moves when `d >= 1`.
    pub remove_floor: f64,
}

impl Default for MoveSchedule {
    fn default() -> Self {
        Self {
            lambda_add: 1.0,
            lambda_swap: 4.0,
            d_bar: 4,
            remove_floor: 0.05,
        }
    }
}

impl MoveSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_add > 0.0 && self.lambda_swap > 0.0 && self.d_bar >= 1) {
            return Err(AgpError::InvalidParameter(
                "move schedule rates must be positive".into(),
            ));
        }
        if !(self.remove_floor > 0.0 && self.remove_floor < 1.0) {
            return Err(AgpError::InvalidParameter(
                "remove floor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Probabilities of the Add, Remove and Swap moves for one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveWeights {
    pub add: f64,
    pub remove: f64,
    pub swap: f64,
}

impl MoveWeights {
    pub fn get(&self, kind: MoveKind) -> f64 {
        match kind {
            MoveKind::Add => self.add,
            MoveKind::Remove => self.remove,
            MoveKind::Swap => self.swap,
            _ => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.add + self.remove + self.swap
    }
}

fn ln_poisson(d: usize, mean: f64) -> f64 {
    d as f64 * mean.ln() - mean - ln_factorial(d as u64)
}

/// Move probabilities for a component of size `d` out of `p` predictors.
///
/// `u_A = h_A(d) / h_A(1)` and `u_S = h_S(d) / h_S(d_bar)` are peak-normalized;
/// `w_A = u_A (1 - eps)`, `w_S = u_S (1 - u_A)(1 - eps)` and Remove takes the
/// rest, so `w_R >= eps` whenever `d >= 1`.
pub fn move_weights(d: usize, p: usize, sched: &MoveSchedule) -> Result<MoveWeights> {
    if d > p {
        return Err(AgpError::InvalidParameter(format!(
            "component size {d} exceeds predictor count {p}"
        )));
    }
    if d == 0 {
        return Ok(MoveWeights {
            add: 1.0,
            remove: 0.0,
            swap: 0.0,
        });
    }
    let eps = sched.remove_floor;
    let u_add = (-sched.lambda_add * (d as f64 - 1.0)).exp();
    let u_swap = if d == p {
        0.0
    } else {
        (ln_poisson(d, sched.lambda_swap) - ln_poisson(sched.d_bar, sched.lambda_swap))
            .exp()
            .min(1.0)
    };
    let add = u_add * (1.0 - eps);
    let swap = u_swap * (1.0 - u_add) * (1.0 - eps);
    let remove = 1.0 - add - swap;
    Ok(MoveWeights { add, remove, swap })
}

/// `(k_min, k_max) = (max(1, floor(ln p)), ceil(sqrt(p)))`.
pub fn component_bounds(p: usize) -> Result<(usize, usize)> {
    if p < 2 {
        return Err(AgpError::InvalidParameter(format!(
            "need at least two predictors, got {p}"
        )));
    }
    let k_min = ((p as f64).ln().floor() as usize).max(1);
    let k_max = (p as f64).sqrt().ceil() as usize;
    Ok((k_min, k_max.max(k_min)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rho_grid_inverts_explained_variance() {
        assert_eq!(rho_for_r2(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(rho_for_r2(0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rho_for_r2(0.99).unwrap(), 99f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rho_for_r2(0.99).unwrap(), 9.9499, epsilon = 1e-4);
        assert!(rho_for_r2(1.0).is_err());
    }

    #[test]
    fn lambda_grid_inverts_correlation() {
        let l99 = lambda_for_correlation(0.99).unwrap();
        let l70 = lambda_for_correlation(0.70).unwrap();
        assert_abs_diff_eq!(l99, 1.0025, epsilon = 1e-4);
        assert_abs_diff_eq!(l70, 5.9722, epsilon = 1e-4);
        assert_abs_diff_eq!((-0.01 * l70 * l70).exp(), 0.70, epsilon = 1e-14);
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grids();
        assert_eq!(g.n_rho(), 6);
        assert_eq!(g.n_lambda(), 5);
        assert_eq!(g.rho_values()[0], 0.0);
        for w in g.rho_weights() {
            assert_abs_diff_eq!(*w, 1.0 / 6.0, epsilon = 1e-15);
        }
        assert!(g.lambda_values().windows(2).all(|w| w[0] < w[1]));
        for i in 0..g.n_cells() {
            assert_eq!(g.cell_index(g.cell(i)), i);
        }
    }

    #[test]
    fn weighted_grid_follows_power_and_exponential_laws() {
        let g = GridSpec::from_targets(&DEFAULT_R2_TARGETS, &DEFAULT_CORRELATION_TARGETS, 2.0, 0.5)
            .unwrap();
        let w = g.rho_weights();
        let r = g.rho_values();
        for i in 1..w.len() {
            let expected = ((1.0 + r[0]) / (1.0 + r[i])).powf(2.0);
            assert_abs_diff_eq!(w[i] / w[0], expected, epsilon = 1e-12);
        }
        let lw = g.lambda_weights();
        let l = g.lambda_values();
        assert_abs_diff_eq!(lw[1] / lw[0], (-0.5 * (l[1] - l[0])).exp(), epsilon = 1e-12);
    }

    #[test]
    fn grid_rejects_bad_values() {
        assert!(GridSpec::new(vec![0.5, 1.0], vec![1.0], 0.0, 0.0).is_err());
        assert!(GridSpec::new(vec![0.0, 1.0, 1.0], vec![1.0], 0.0, 0.0).is_err());
        assert!(GridSpec::new(vec![0.0], vec![0.0, 1.0], 0.0, 0.0).is_err());
        assert!(GridSpec::new(vec![0.0], vec![1.0], -1.0, 0.0).is_err());
    }

    #[test]
    fn inclusion_prior_examples() {
        let g = InclusionVector::from_indices(7, &[0, 3]).unwrap();
        assert_abs_diff_eq!(
            log_inclusion_prior(&g, 0.5).unwrap(),
            -7.0 * 2f64.ln(),
            epsilon = 1e-12
        );
        let empty = InclusionVector::empty(100);
        assert_abs_diff_eq!(
            log_inclusion_prior(&empty, 0.01).unwrap(),
            100.0 * 0.99f64.ln(),
            epsilon = 1e-12
        );
        let one = InclusionVector::from_indices(3, &[0]).unwrap();
        assert_abs_diff_eq!(
            log_inclusion_prior(&one, 0.2).unwrap(),
            (0.2f64 * 0.8 * 0.8).ln(),
            epsilon = 1e-12
        );
        assert!(log_inclusion_prior(&one, 0.0).is_err());
        assert!(log_inclusion_prior(&one, 1.0).is_err());
    }

    #[test]
    fn tau_posterior_parameters() {
        let prior = InclusionPrior::new(1.0, 100).unwrap();
        let (a, b) = prior.tau_posterior(9, 5);
        // nu' = 1000, mu' = 0.006
        assert_abs_diff_eq!(a, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a + b, 1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a / (a + b), 0.006, epsilon = 1e-15);
        let (a0, b0) = prior.tau_posterior(0, 0);
        let (pa, pb) = prior.beta_params();
        assert_abs_diff_eq!(a0, pa, epsilon = 1e-12);
        assert_abs_diff_eq!(b0, pb, epsilon = 1e-12);
        assert!(InclusionPrior::new(0.0, 10).is_err());
        assert!(InclusionPrior::new(10.0, 10).is_err());
    }

    #[test]
    fn sampled_tau_mean_matches_beta_mean() {
        let prior = InclusionPrior::new(1.0, 100).unwrap();
        let mut state = EnsembleState::new(100, 10, 1, 10, 0.01);
        for l in 0..9 {
            let idx: Vec<usize> = if l < 5 { vec![l] } else { vec![] };
            state.components_mut()[l].gamma = InclusionVector::from_indices(100, &idx).unwrap();
            state.components_mut()[l].cell = GridCell::new(1, 0);
        }
        state.refresh_active_from_content();
        assert_eq!(state.k_active(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 20_000;
        let mean: f64 = (0..draws)
            .map(|_| sample_tau(&state, &prior, &mut rng).unwrap())
            .sum::<f64>()
            / draws as f64;
        // Beta(6, 994): mean 0.006, sd ~ 0.00244
        let sd = (6.0f64 * 994.0 / (1000.0f64.powi(2) * 1001.0)).sqrt();
        assert!((mean - 0.006).abs() < 4.0 * sd / (draws as f64).sqrt());
    }

    #[test]
    fn move_weights_examples() {
        let s = MoveSchedule::default();
        let w0 = move_weights(0, 10, &s).unwrap();
        assert_eq!((w0.add, w0.remove, w0.swap), (1.0, 0.0, 0.0));
        let swaps: Vec<f64> = (1..=10).map(|d| move_weights(d, 20, &s).unwrap().swap).collect();
        let argmax = swaps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            + 1;
        assert_eq!(argmax, 4);
        let adds: Vec<f64> = (1..=10).map(|d| move_weights(d, 20, &s).unwrap().add).collect();
        assert!(adds.windows(2).all(|w| w[1] < w[0]));
        assert!(move_weights(11, 10, &s).is_err());
        let full = move_weights(10, 10, &s).unwrap();
        assert_eq!(full.swap, 0.0);
    }

    #[test]
    fn move_weights_sum_to_one_and_keep_remove_reachable() {
        let s = MoveSchedule::default();
        for p in [1usize, 2, 4, 50, 1000] {
            for d in 0..=p.min(60) {
                let w = move_weights(d, p, &s).unwrap();
                assert!((w.sum() - 1.0).abs() < 1e-15, "p={p} d={d}");
                assert!(w.add >= 0.0 && w.remove >= 0.0 && w.swap >= 0.0);
                if d >= 1 {
                    assert!(w.remove >= s.remove_floor - 1e-15);
                }
                assert!(w.add > 0.0);
            }
        }
    }

    #[test]
    fn component_bound_examples() {
        assert_eq!(component_bounds(1000).unwrap(), (6, 32));
        assert_eq!(component_bounds(50).unwrap(), (3, 8));
        assert_eq!(component_bounds(3).unwrap().0, 1);
        assert_eq!(component_bounds(2).unwrap(), (1, 2));
        assert!(component_bounds(1).is_err());
    }

    fn ln_beta(a: f64, b: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
    }

    #[test]
    fn beta_binomial_prior_concentrates_on_small_components() {
        // exact Beta-binomial pmf over |gamma| for p = 100, d* = 1
        let prior = InclusionPrior::new(1.0, 100).unwrap();
        let (a, b) = prior.beta_params();
        let p = 100u64;
        let pmf = |d: u64| {
            (ln_factorial(p) - ln_factorial(d) - ln_factorial(p - d) + ln_beta(d as f64 + a, (p - d) as f64 + b)
                - ln_beta(a, b))
            .exp()
        };
        let total: f64 = (0..=p).map(pmf).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        let small: f64 = (0..=3).map(pmf).sum();
        assert!(small > 0.9, "mass on |gamma| <= 3 is {small}");
    }

    proptest::proptest! {
        #[test]
        fn grid_weights_normalized(alpha in 0.0f64..20.0, beta in 0.0f64..20.0) {
            let g = GridSpec::from_targets(&DEFAULT_R2_TARGETS, &DEFAULT_CORRELATION_TARGETS, alpha, beta).unwrap();
            let sr: f64 = g.rho_weights().iter().sum();
            let sl: f64 = g.lambda_weights().iter().sum();
            proptest::prop_assert!((sr - 1.0).abs() < 1e-12);
            proptest::prop_assert!((sl - 1.0).abs() < 1e-12);
        }

        #[test]
        fn complement_identity(bits in proptest::collection::vec(proptest::bool::ANY, 1..40), tau in 0.01f64..0.99) {
            let p = bits.len();
            let idx: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
            let comp: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| !**b).map(|(i, _)| i).collect();
            let g = InclusionVector::from_indices(p, &idx).unwrap();
            let gc = InclusionVector::from_indices(p, &comp).unwrap();
            let total = log_inclusion_prior(&g, tau).unwrap() + log_inclusion_prior(&gc, tau).unwrap();
            let expected = p as f64 * (tau.ln() + (1.0 - tau).ln());
            proptest::prop_assert!((total - expected).abs() < 1e-9);
            let mirrored = log_inclusion_prior(&gc, 1.0 - tau).unwrap();
            proptest::prop_assert!((mirrored - log_inclusion_prior(&g, tau).unwrap()).abs() < 1e-9);
        }
    }
}
