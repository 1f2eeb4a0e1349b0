//! Posterior targets scored by the sampler.
//!
//! Every score returned here is the unnormalized log joint
//! `sum_l [log pi(gamma_l | tau) + log pi(rho_l, lambda_l)] + log p(y | xi)`
//! of a whole ensemble state, so values from different conditionals of the
//! same state are directly comparable.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AgpError, Result};
use crate::linalg::{
    cholesky, chol_logdet, default_rank, log_marginal_likelihood, log_ml_dense_sigma, log_sum_exp,
    pivoted_lowrank, se_covariance, t_log_density, KernelMatrix, KernelRef, MarginalScale,
};
use crate::priors::{log_inclusion_prior, GridCell, GridSpec};
use crate::state::{ComponentState, EnsembleState, InclusionVector};

/// Scores of one component's candidate inclusion vectors with all other
/// components held fixed.
pub trait Conditional {
    /// Log joint for `gamma` at every grid cell (rho-major order).
    fn cells(&mut self, gamma: &InclusionVector) -> Result<Vec<f64>>;

    /// Grid-marginalized log score of `gamma`.
    fn score(&mut self, gamma: &InclusionVector) -> Result<f64> {
        Ok(log_sum_exp(&self.cells(gamma)?))
    }
}

/// Scores of two components' joint configurations with the rest fixed.
pub trait PairConditional {
    /// Log joint at every `(cell_m, cell_n)`, indexed `cell_m * |G| + cell_n`.
    fn cells(&mut self, gamma_m: &InclusionVector, gamma_n: &InclusionVector) -> Result<Vec<f64>>;

    /// Log joint at one pair of cells.
    fn cell(
        &mut self,
        gamma_m: &InclusionVector,
        gamma_n: &InclusionVector,
        cell_m: GridCell,
        cell_n: GridCell,
    ) -> Result<f64>;
}

/// A discrete posterior over ensemble states that the sampler can explore.
pub trait Target {
    type Cond<'a>: Conditional
    where
        Self: 'a;
    type Pair<'a>: PairConditional
    where
        Self: 'a;

    fn p(&self) -> usize;
    fn grid(&self) -> &GridSpec;
    fn log_joint(&self, state: &EnsembleState) -> Result<f64>;
    fn conditional(&self, state: &EnsembleState, l: usize) -> Result<Self::Cond<'_>>;
    fn pair(&self, state: &EnsembleState, m: usize, n: usize) -> Result<Self::Pair<'_>>;
}

/// How marginal likelihoods are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LikelihoodMode {
    Dense,
    LowRank { rank: usize },
}

impl LikelihoodMode {
    /// Dense Cholesky up to `n = 200`, pivoted low rank above.
    pub fn auto(n: usize) -> Self {
        if n <= 200 {
            LikelihoodMode::Dense
        } else {
            LikelihoodMode::LowRank {
                rank: default_rank(n),
            }
        }
    }
}

/// AGP posterior for a standardized dataset.
#[derive(Debug, Clone)]
pub struct ModelTarget {
    x: DMatrix<f64>,
    y: DVector<f64>,
    grid: GridSpec,
    scale: MarginalScale,
    mode: LikelihoodMode,
}

fn component_prior(c: &ComponentState, grid: &GridSpec, tau: f64) -> Result<f64> {
    Ok(log_inclusion_prior(&c.gamma, tau)? + grid.log_cell_prior(c.cell))
}

impl ModelTarget {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, grid: GridSpec, scale: MarginalScale) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(AgpError::DimensionMismatch(format!(
                "X has {} rows but y has length {}",
                x.nrows(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(AgpError::EmptyInput("no observations".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(AgpError::NonFinite("training data".into()));
        }
        let mode = LikelihoodMode::auto(y.len());
        Ok(Self {
            x,
            y,
            grid,
            scale,
            mode,
        })
    }

    pub fn with_mode(mut self, mode: LikelihoodMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn scale(&self) -> &MarginalScale {
        &self.scale
    }
    pub fn mode(&self) -> LikelihoodMode {
        self.mode
    }

    pub fn kernel(&self, gamma: &InclusionVector, lambda: f64) -> Result<KernelMatrix> {
        se_covariance(&self.x, gamma, lambda)
    }

    /// `sum rho_l^2 C_l` over components not listed in `skip`.
    pub fn kernel_sum(&self, comps: &[ComponentState], skip: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut k = DMatrix::zeros(n, n);
        for (l, c) in comps.iter().enumerate() {
            if skip.contains(&l) || c.cell.is_null() {
                continue;
            }
            let rho = self.grid.rho(c.cell);
            let cm = self.kernel(&c.gamma, self.grid.lambda(c.cell))?;
            k += cm.values() * (rho * rho);
        }
        Ok(k)
    }

    /// `Sigma = I + K` for the given components.
    pub fn sigma(&self, comps: &[ComponentState]) -> Result<DMatrix<f64>> {
        let mut s = self.kernel_sum(comps, &[])?;
        for i in 0..self.n() {
            s[(i, i)] += 1.0;
        }
        Ok(s)
    }

    /// Log marginal likelihood of `y` given `K`, honoring the likelihood mode.
    pub fn log_ml_kernel(&self, k: DMatrix<f64>) -> Result<f64> {
        match self.mode {
            LikelihoodMode::Dense => {
                let mut s = k;
                for i in 0..self.n() {
                    s[(i, i)] += 1.0;
                }
                log_ml_dense_sigma(s, &self.y, &self.scale)
            }
            LikelihoodMode::LowRank { rank } => {
                let km = KernelMatrix::new(k)?;
                let f = pivoted_lowrank(&km, rank.clamp(1, self.n()), 0.0)?;
                log_marginal_likelihood(&self.y, KernelRef::LowRank(&f), &self.scale)
            }
        }
    }

    pub fn log_ml_components(&self, comps: &[ComponentState]) -> Result<f64> {
        self.log_ml_kernel(self.kernel_sum(comps, &[])?)
    }

    fn prior_sum(&self, comps: &[ComponentState], skip: &[usize], tau: f64) -> Result<f64> {
        let mut s = 0.0;
        for (l, c) in comps.iter().enumerate() {
            if !skip.contains(&l) {
                s += component_prior(c, &self.grid, tau)?;
            }
        }
        Ok(s)
    }

    fn check_state(&self, state: &EnsembleState) -> Result<()> {
        if state.p() != self.p() {
            return Err(AgpError::DimensionMismatch(format!(
                "state has p = {} but data has {} predictors",
                state.p(),
                self.p()
            )));
        }
        Ok(())
    }
}

impl Target for ModelTarget {
    type Cond<'a> = ModelConditional<'a>;
    type Pair<'a> = ModelPair<'a>;

    fn p(&self) -> usize {
        self.x.ncols()
    }

    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn log_joint(&self, state: &EnsembleState) -> Result<f64> {
        self.check_state(state)?;
        let comps = state.components();
        Ok(self.prior_sum(comps, &[], state.tau())? + self.log_ml_components(comps)?)
    }

    fn conditional(&self, state: &EnsembleState, l: usize) -> Result<ModelConditional<'_>> {
        self.check_state(state)?;
        let comps = state.components();
        let base_k = self.kernel_sum(comps, &[l])?;
        let rest_prior = self.prior_sum(comps, &[l], state.tau())?;
        let base = BaseFactor::new(self, base_k)?;
        Ok(ModelConditional {
            model: self,
            base,
            rest_prior,
            tau: state.tau(),
            memo: HashMap::new(),
        })
    }

    fn pair(&self, state: &EnsembleState, m: usize, n: usize) -> Result<ModelPair<'_>> {
        self.check_state(state)?;
        if m == n {
            return Err(AgpError::InvalidParameter(
                "pair conditional needs two distinct components".into(),
            ));
        }
        let comps = state.components();
        let base_k = self.kernel_sum(comps, &[m, n])?;
        let rest_prior = self.prior_sum(comps, &[m, n], state.tau())?;
        let base = BaseFactor::new(self, base_k)?;
        Ok(ModelPair {
            model: self,
            base,
            rest_prior,
            tau: state.tau(),
        })
    }
}

/// Kernel of the fixed components and its likelihood.
struct BaseFactor {
    k: DMatrix<f64>,
    logml: f64,
    /// Cholesky pieces of `I + K` used for rank-one updates (dense mode only).
    ones: Option<RankOne>,
}

struct RankOne {
    logdet: f64,
    q: f64,
    /// `1' Sigma^-1 1`
    s11: f64,
    /// `1' Sigma^-1 y`
    s1y: f64,
}

impl BaseFactor {
    fn new(model: &ModelTarget, k: DMatrix<f64>) -> Result<Self> {
        match model.mode {
            LikelihoodMode::Dense => {
                let n = model.n();
                let mut s = k.clone();
                for i in 0..n {
                    s[(i, i)] += 1.0;
                }
                let c = cholesky(s)?;
                let logdet = chol_logdet(&c);
                let l = c.l_dirty();
                let zy = l
                    .solve_lower_triangular(&model.y)
                    .ok_or_else(|| AgpError::NotPositiveDefinite("base solve".into()))?;
                let z1 = l
                    .solve_lower_triangular(&DVector::from_element(n, 1.0))
                    .ok_or_else(|| AgpError::NotPositiveDefinite("base solve".into()))?;
                let q = zy.norm_squared();
                let logml = t_log_density(n, logdet, q, &model.scale);
                Ok(Self {
                    k,
                    logml,
                    ones: Some(RankOne {
                        logdet,
                        q,
                        s11: z1.norm_squared(),
                        s1y: z1.dot(&zy),
                    }),
                })
            }
            LikelihoodMode::LowRank { .. } => {
                let logml = model.log_ml_kernel(k.clone())?;
                Ok(Self { k, logml, ones: None })
            }
        }
    }

    /// Likelihood after adding `sum_i c_i^2 * kernel_i`; an empty inclusion
    /// vector contributes the all-ones matrix.
    fn logml_with(&self, model: &ModelTarget, terms: &[(f64, &KernelMatrix, bool)]) -> Result<f64> {
        let active: Vec<&(f64, &KernelMatrix, bool)> = terms.iter().filter(|t| t.0 > 0.0).collect();
        if active.is_empty() {
            return Ok(self.logml);
        }
        let ones_total: f64 = active.iter().filter(|t| t.2).map(|t| t.0 * t.0).sum();
        if let (Some(r1), true) = (&self.ones, active.iter().all(|t| t.2)) {
            // Sigma + c 11': matrix determinant lemma and Sherman-Morrison
            let c = ones_total;
            let denom = 1.0 + c * r1.s11;
            let logdet = r1.logdet + denom.ln();
            let q = r1.q - c * r1.s1y * r1.s1y / denom;
            return Ok(t_log_density(model.n(), logdet, q, &model.scale));
        }
        let mut k = self.k.clone();
        for (rho, km, _) in active {
            k += km.values() * (rho * rho);
        }
        model.log_ml_kernel(k)
    }
}

/// Conditional of one component under [`ModelTarget`].
pub struct ModelConditional<'a> {
    model: &'a ModelTarget,
    base: BaseFactor,
    rest_prior: f64,
    tau: f64,
    memo: HashMap<InclusionVector, Vec<f64>>,
}

impl ModelConditional<'_> {
    fn compute(&self, gamma: &InclusionVector) -> Result<Vec<f64>> {
        let grid = &self.model.grid;
        let prior = self.rest_prior + log_inclusion_prior(gamma, self.tau)?;
        let mut out = vec![0.0; grid.n_cells()];
        for li in 0..grid.n_lambda() {
            let kernel = if grid.n_rho() > 1 {
                Some(self.model.kernel(gamma, grid.lambda_values()[li])?)
            } else {
                None
            };
            for ri in 0..grid.n_rho() {
                let cell = GridCell::new(ri, li);
                let rho = grid.rho(cell);
                let logml = match (&kernel, rho > 0.0) {
                    (Some(km), true) => self.base.logml_with(self.model, &[(rho, km, gamma.is_empty())])?,
                    _ => self.base.logml,
                };
                out[grid.cell_index(cell)] = prior + grid.log_cell_prior(cell) + logml;
            }
        }
        Ok(out)
    }
}

impl Conditional for ModelConditional<'_> {
    fn cells(&mut self, gamma: &InclusionVector) -> Result<Vec<f64>> {
        if let Some(v) = self.memo.get(gamma) {
            return Ok(v.clone());
        }
        let v = self.compute(gamma)?;
        self.memo.insert(gamma.clone(), v.clone());
        Ok(v)
    }
}

/// Joint conditional of two components under [`ModelTarget`].
pub struct ModelPair<'a> {
    model: &'a ModelTarget,
    base: BaseFactor,
    rest_prior: f64,
    tau: f64,
}

impl ModelPair<'_> {
    fn kernels(&self, gamma: &InclusionVector) -> Result<Vec<KernelMatrix>> {
        self.model
            .grid
            .lambda_values()
            .iter()
            .map(|&l| self.model.kernel(gamma, l))
            .collect()
    }
}

impl PairConditional for ModelPair<'_> {
    fn cells(&mut self, gm: &InclusionVector, gn: &InclusionVector) -> Result<Vec<f64>> {
        let grid = &self.model.grid;
        let g = grid.n_cells();
        let prior = self.rest_prior + log_inclusion_prior(gm, self.tau)? + log_inclusion_prior(gn, self.tau)?;
        let km = self.kernels(gm)?;
        let kn = self.kernels(gn)?;
        let mut out = vec![0.0; g * g];
        // logml only depends on the cells through (rho, lambda) when rho > 0
        let mut cache: HashMap<(Option<GridCell>, Option<GridCell>), f64> = HashMap::new();
        for i in 0..g {
            let cm = grid.cell(i);
            for j in 0..g {
                let cn = grid.cell(j);
                let key = (
                    (!cm.is_null()).then_some(cm),
                    (!cn.is_null()).then_some(cn),
                );
                let logml = match cache.get(&key) {
                    Some(&v) => v,
                    None => {
                        let v = self.base.logml_with(
                            self.model,
                            &[
                                (grid.rho(cm), &km[cm.lambda], gm.is_empty()),
                                (grid.rho(cn), &kn[cn.lambda], gn.is_empty()),
                            ],
                        )?;
                        cache.insert(key, v);
                        v
                    }
                };
                out[i * g + j] = prior + grid.log_cell_prior(cm) + grid.log_cell_prior(cn) + logml;
            }
        }
        Ok(out)
    }

    fn cell(
        &mut self,
        gm: &InclusionVector,
        gn: &InclusionVector,
        cm: GridCell,
        cn: GridCell,
    ) -> Result<f64> {
        let grid = &self.model.grid;
        let prior = self.rest_prior
            + log_inclusion_prior(gm, self.tau)?
            + log_inclusion_prior(gn, self.tau)?
            + grid.log_cell_prior(cm)
            + grid.log_cell_prior(cn);
        let km = self.model.kernel(gm, grid.lambda(cm))?;
        let kn = self.model.kernel(gn, grid.lambda(cn))?;
        let logml = self.base.logml_with(
            self.model,
            &[
                (grid.rho(cm), &km, gm.is_empty()),
                (grid.rho(cn), &kn, gn.is_empty()),
            ],
        )?;
        Ok(prior + logml)
    }
}

/// Grid-marginalized log score of `gamma` for component `l`.
pub fn component_log_score<T: Target>(
    target: &T,
    state: &EnsembleState,
    l: usize,
    gamma: &InclusionVector,
) -> Result<f64> {
    target.conditional(state, l)?.score(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::default_grids;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy(n: usize, p: usize, seed: u64) -> ModelTarget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |i, _| (2.0 * x[(i, 0)]).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal));
        ModelTarget::new(x, y, default_grids(), MarginalScale::default()).unwrap()
    }

    fn state_of(p: usize, comps: &[(&[usize], (usize, usize))], tau: f64) -> EnsembleState {
        let cs = comps
            .iter()
            .map(|(g, c)| ComponentState::new(InclusionVector::from_indices(p, g).unwrap(), GridCell::new(c.0, c.1)))
            .collect();
        EnsembleState::with_components(cs, tau).unwrap()
    }

    #[test]
    fn conditional_cells_equal_log_joint() {
        let t = toy(12, 3, 1);
        let state = state_of(3, &[(&[0], (3, 1)), (&[1, 2], (2, 4)), (&[], (1, 0))], 0.3);
        for l in 0..3 {
            let mut cond = t.conditional(&state, l).unwrap();
            for gamma in [vec![], vec![0], vec![1, 2], vec![0, 1, 2]] {
                let g = InclusionVector::from_indices(3, &gamma).unwrap();
                let cells = cond.cells(&g).unwrap();
                for (i, &v) in cells.iter().enumerate() {
                    let mut s = state.clone();
                    s.set_component(l, ComponentState::new(g.clone(), t.grid().cell(i)));
                    assert_abs_diff_eq!(v, t.log_joint(&s).unwrap(), epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn pair_cells_equal_log_joint() {
        let t = toy(10, 3, 2);
        let state = state_of(3, &[(&[0], (3, 1)), (&[2], (2, 4)), (&[1], (4, 2))], 0.2);
        let mut pair = t.pair(&state, 2, 0).unwrap();
        let gm = InclusionVector::from_indices(3, &[1, 0]).unwrap();
        let gn = InclusionVector::empty(3);
        let cells = pair.cells(&gm, &gn).unwrap();
        let g = t.grid().n_cells();
        for idx in [0usize, 7, 31, 200, 899] {
            let (i, j) = (idx / g, idx % g);
            let mut s = state.clone();
            s.set_component(2, ComponentState::new(gm.clone(), t.grid().cell(i)));
            s.set_component(0, ComponentState::new(gn.clone(), t.grid().cell(j)));
            let joint = t.log_joint(&s).unwrap();
            assert_abs_diff_eq!(cells[idx], joint, epsilon = 1e-8);
            let single = pair.cell(&gm, &gn, t.grid().cell(i), t.grid().cell(j)).unwrap();
            assert_abs_diff_eq!(single, joint, epsilon = 1e-8);
        }
    }

    #[test]
    fn score_matches_brute_force_sum() {
        // p = 2, n = 3, one component: direct sum of prior x likelihood terms
        let t = toy(3, 2, 3);
        let state = state_of(2, &[(&[], (0, 0))], 0.4);
        let grid = t.grid().clone();
        for gamma in [vec![], vec![0], vec![1], vec![0, 1]] {
            let g = InclusionVector::from_indices(2, &gamma).unwrap();
            let mut total = 0.0;
            for i in 0..grid.n_cells() {
                let cell = grid.cell(i);
                let k = se_covariance(t.x(), &g, grid.lambda(cell)).unwrap().scaled(grid.rho(cell).powi(2));
                let ml = log_marginal_likelihood(t.y(), KernelRef::Dense(&k), t.scale()).unwrap().exp();
                let d = g.size() as f64;
                total += 0.4f64.powf(d) * 0.6f64.powf(2.0 - d) * grid.rho_weights()[cell.rho] * grid.lambda_weights()[cell.lambda] * ml;
            }
            let score = component_log_score(&t, &state, 0, &g).unwrap();
            assert_abs_diff_eq!(score, total.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn null_rho_grid_makes_gamma_irrelevant_to_likelihood() {
        let base = toy(8, 3, 4);
        let grid = GridSpec::new(vec![0.0], vec![1.0, 2.0], 0.0, 0.0).unwrap();
        let t = ModelTarget::new(base.x().clone(), base.y().clone(), grid, MarginalScale::default()).unwrap();
        let state = state_of(3, &[(&[], (0, 0))], 0.5);
        let s1 = component_log_score(&t, &state, 0, &InclusionVector::from_indices(3, &[0]).unwrap()).unwrap();
        let s2 = component_log_score(&t, &state, 0, &InclusionVector::from_indices(3, &[1, 2]).unwrap()).unwrap();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-12);
    }

    #[test]
    fn lowrank_mode_matches_dense_at_full_rank() {
        let t = toy(30, 3, 5);
        let lr = t.clone().with_mode(LikelihoodMode::LowRank { rank: 30 });
        let state = state_of(3, &[(&[0], (3, 1)), (&[1, 2], (2, 4))], 0.3);
        assert_abs_diff_eq!(t.log_joint(&state).unwrap(), lr.log_joint(&state).unwrap(), epsilon = 1e-6);
        let g = InclusionVector::from_indices(3, &[2]).unwrap();
        let a = t.conditional(&state, 1).unwrap().cells(&g).unwrap();
        let b = lr.conditional(&state, 1).unwrap().cells(&g).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-6);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let x = DMatrix::zeros(3, 2);
        let y = DVector::zeros(4);
        assert!(ModelTarget::new(x, y, default_grids(), MarginalScale::default()).is_err());
        let t = toy(5, 2, 6);
        let state = state_of(3, &[(&[0], (1, 1))], 0.3);
        assert!(t.log_joint(&state).is_err());
    }
}
