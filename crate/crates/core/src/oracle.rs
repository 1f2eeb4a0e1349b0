//! Brute-force posteriors and numerical checks of the samplers' invariance.
//!
//! For tiny problems (`p <= 8`, at most two components) every joint state
//! `(gamma_1, cell_1, ..., gamma_k, cell_k)` is enumerated and scored through
//! the same [`Target`] code the sampler uses. The exact table then serves as
//! the reference for one-step flux (detailed balance) tests and long-run
//! frequency (stationarity) tests of the move kernels.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{AgpError, Result};
use crate::linalg::log_sum_exp;
use crate::model::{Conditional, PairConditional, Target};
use crate::priors::{move_weights, GridCell, GridSpec, MoveKind};
use crate::sampler::{dmtm_update, ensemble_sweep, icm_kind_weights, icm_step_with_kind, DmtmParams, IcmParams};
use crate::simbench::derive_seed;
use crate::state::{ComponentState, EnsembleState, InclusionVector};

pub const MAX_P: usize = 8;
pub const MAX_COMPONENTS: usize = 2;
pub const MAX_STATES: u128 = 1_000_000;
/// Shortest chain accepted by [`check_stationarity`].
pub const MIN_CHAIN: usize = 100_000;
/// Fewest one-step trials per source state accepted by the flux checks.
pub const MIN_TRIALS: usize = 10_000;
/// Studentized discrepancy above which a state pair is flagged.
pub const Z_FLAG: f64 = 3.0;
/// Family-wise false-alarm rate of one report's Bonferroni threshold.
pub const FAMILY_ALPHA: f64 = 1e-3;

fn gamma_code(g: &InclusionVector) -> usize {
    g.iter().fold(0, |acc, j| acc | (1 << j))
}

fn gamma_from_code(p: usize, code: usize) -> InclusionVector {
    InclusionVector::from_bools(&(0..p).map(|j| code >> j & 1 == 1).collect::<Vec<_>>())
}

/// Mixed-radix indexing of joint states; component 0 is the most significant digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub p: usize,
    pub k: usize,
    pub n_cells: usize,
}

impl StateSpace {
    pub fn new(p: usize, k: usize, n_cells: usize) -> Result<Self> {
        if p == 0 || k == 0 || n_cells == 0 {
            return Err(AgpError::InvalidParameter(
                "state space needs p, k and |G| positive".into(),
            ));
        }
        let states = (1u128 << p.min(127)).saturating_mul(n_cells as u128).saturating_pow(k as u32);
        if p > MAX_P || k > MAX_COMPONENTS || states > MAX_STATES {
            return Err(AgpError::BudgetExceeded {
                states: if p > MAX_P || k > MAX_COMPONENTS { states.max(MAX_STATES + 1) } else { states },
                limit: MAX_STATES,
            });
        }
        Ok(Self { p, k, n_cells })
    }

    /// States of one component, `2^p |G|`.
    pub fn radix(&self) -> usize {
        (1 << self.p) * self.n_cells
    }

    pub fn n_states(&self) -> usize {
        self.radix().pow(self.k as u32)
    }

    /// Place value of component `l`'s digit.
    pub fn stride(&self, l: usize) -> usize {
        self.radix().pow((self.k - 1 - l) as u32)
    }

    fn digit(&self, c: &ComponentState, grid: &GridSpec) -> usize {
        gamma_code(&c.gamma) * self.n_cells + grid.cell_index(c.cell)
    }

    pub fn index(&self, state: &EnsembleState, grid: &GridSpec) -> Result<usize> {
        if state.p() != self.p || state.k_max() != self.k {
            return Err(AgpError::DimensionMismatch(format!(
                "state with p = {}, k = {} in a space with p = {}, k = {}",
                state.p(),
                state.k_max(),
                self.p,
                self.k
            )));
        }
        Ok(state
            .components()
            .iter()
            .enumerate()
            .map(|(l, c)| self.digit(c, grid) * self.stride(l))
            .sum())
    }

    pub fn components(&self, index: usize, grid: &GridSpec) -> Vec<ComponentState> {
        (0..self.k)
            .map(|l| {
                let d = index / self.stride(l) % self.radix();
                ComponentState::new(gamma_from_code(self.p, d / self.n_cells), grid.cell(d % self.n_cells))
            })
            .collect()
    }

    /// The state at `index` with every component active.
    pub fn state(&self, index: usize, grid: &GridSpec, tau: f64) -> EnsembleState {
        EnsembleState::with_components(self.components(index, grid), tau)
            .expect("k >= 1 components of equal length")
    }
}

/// Exactly normalized posterior over a small joint state space at fixed `tau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactPosterior {
    pub space: StateSpace,
    pub grid: GridSpec,
    pub tau: f64,
    /// Normalized log probability of every state, in [`StateSpace`] order.
    pub log_probs: Vec<f64>,
}

impl ExactPosterior {
    /// Scores every state with `target` and normalizes.
    pub fn enumerate<T: Target + Sync>(target: &T, k: usize, tau: f64) -> Result<Self> {
        let grid = target.grid().clone();
        let space = StateSpace::new(target.p(), k, grid.n_cells())?;
        let p = space.p;
        let codes = 1usize << p;
        let empty = EnsembleState::with_components(vec![ComponentState::empty(p); k], tau)?;
        let blocks: Vec<Vec<f64>> = (0..codes)
            .into_par_iter()
            .map(|code| -> Result<Vec<f64>> {
                let g0 = gamma_from_code(p, code);
                if k == 1 {
                    return target.conditional(&empty, 0)?.cells(&g0);
                }
                let mut pair = target.pair(&empty, 0, 1)?;
                let mut block = Vec::with_capacity(space.radix() * grid.n_cells());
                // digits of component 0 are (code, cell_0); reorder from pair's
                // (cell_0, cell_1) layout to the space's (cell_0, code_1, cell_1)
                let per_g1: Vec<Vec<f64>> = (0..codes)
                    .map(|c1| pair.cells(&g0, &gamma_from_code(p, c1)))
                    .collect::<Result<_>>()?;
                let g = grid.n_cells();
                for c0 in 0..g {
                    for s1 in per_g1.iter() {
                        block.extend_from_slice(&s1[c0 * g..(c0 + 1) * g]);
                    }
                }
                Ok(block)
            })
            .collect::<Result<_>>()?;
        let log_joint: Vec<f64> = blocks.into_iter().flatten().collect();
        Self::from_log_joint(space, grid, tau, log_joint)
    }

    /// Normalizes unnormalized log scores given in [`StateSpace`] order.
    pub fn from_log_joint(space: StateSpace, grid: GridSpec, tau: f64, log_joint: Vec<f64>) -> Result<Self> {
        if log_joint.len() != space.n_states() {
            return Err(AgpError::DimensionMismatch(format!(
                "{} scores for {} states",
                log_joint.len(),
                space.n_states()
            )));
        }
        if log_joint.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(AgpError::NonFinite("enumerated scores".into()));
        }
        let z = log_sum_exp(&log_joint);
        if !z.is_finite() {
            return Err(AgpError::NonFinite("posterior normalizer".into()));
        }
        Ok(Self {
            space,
            grid,
            tau,
            log_probs: log_joint.into_iter().map(|v| v - z).collect(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.log_probs.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    pub fn index(&self, state: &EnsembleState) -> Result<usize> {
        self.space.index(state, &self.grid)
    }

    pub fn state(&self, index: usize) -> EnsembleState {
        self.space.state(index, &self.grid, self.tau)
    }

    /// Posterior of the first component's inclusion vector, by bit code.
    pub fn gamma_marginal(&self) -> Vec<f64> {
        let codes = 1 << self.space.p;
        let top = self.space.stride(0) * self.space.n_cells;
        let mut out = vec![0.0; codes];
        for (i, lp) in self.log_probs.iter().enumerate() {
            out[i / top] += lp.exp();
        }
        out
    }

    /// Table-backed target reproducing these scores.
    pub fn table(&self) -> TableTarget<'_> {
        TableTarget { exact: self }
    }

    /// Kullback-Leibler divergence of the first component's inclusion marginal
    /// from the inclusion prior at `tau`.
    pub fn gamma_kl_from_prior(&self) -> f64 {
        let p = self.space.p;
        self.gamma_marginal()
            .iter()
            .enumerate()
            .filter(|(_, &q)| q > 0.0)
            .map(|(code, &q)| {
                let d = code.count_ones() as i32;
                let prior = self.tau.powi(d) * (1.0 - self.tau).powi(p as i32 - d);
                q * (q / prior).ln()
            })
            .sum()
    }
}

/// [`Target`] answering every score by lookup in an [`ExactPosterior`].
///
/// Lets the oracle drive the unmodified sampler kernels over millions of steps
/// without refactorizing covariance matrices.
#[derive(Debug, Clone, Copy)]
pub struct TableTarget<'a> {
    exact: &'a ExactPosterior,
}

impl TableTarget<'_> {
    fn check(&self, state: &EnsembleState) -> Result<usize> {
        if state.tau() != self.exact.tau {
            return Err(AgpError::InvalidParameter(format!(
                "table built at tau = {} queried at tau = {}",
                self.exact.tau,
                state.tau()
            )));
        }
        self.exact.index(state)
    }

    fn base_without(&self, state: &EnsembleState, skip: &[usize]) -> Result<usize> {
        let idx = self.check(state)?;
        let space = &self.exact.space;
        Ok(skip.iter().fold(idx, |acc, &l| {
            acc - (idx / space.stride(l) % space.radix()) * space.stride(l)
        }))
    }
}

pub struct TableConditional<'a> {
    exact: &'a ExactPosterior,
    base: usize,
    stride: usize,
}

impl Conditional for TableConditional<'_> {
    fn cells(&mut self, gamma: &InclusionVector) -> Result<Vec<f64>> {
        let g = self.exact.space.n_cells;
        let start = gamma_code(gamma) * g;
        Ok((0..g)
            .map(|c| self.exact.log_probs[self.base + (start + c) * self.stride])
            .collect())
    }
}

pub struct TablePair<'a> {
    exact: &'a ExactPosterior,
    base: usize,
    stride_m: usize,
    stride_n: usize,
}

impl TablePair<'_> {
    fn at(&self, gm: usize, gn: usize, cm: usize, cn: usize) -> f64 {
        let g = self.exact.space.n_cells;
        self.exact.log_probs[self.base + (gm * g + cm) * self.stride_m + (gn * g + cn) * self.stride_n]
    }
}

impl PairConditional for TablePair<'_> {
    fn cells(&mut self, gamma_m: &InclusionVector, gamma_n: &InclusionVector) -> Result<Vec<f64>> {
        let g = self.exact.space.n_cells;
        let (a, b) = (gamma_code(gamma_m), gamma_code(gamma_n));
        Ok((0..g * g).map(|c| self.at(a, b, c / g, c % g)).collect())
    }

    fn cell(
        &mut self,
        gamma_m: &InclusionVector,
        gamma_n: &InclusionVector,
        cell_m: GridCell,
        cell_n: GridCell,
    ) -> Result<f64> {
        let grid = &self.exact.grid;
        Ok(self.at(
            gamma_code(gamma_m),
            gamma_code(gamma_n),
            grid.cell_index(cell_m),
            grid.cell_index(cell_n),
        ))
    }
}

impl Target for TableTarget<'_> {
    type Cond<'a>
        = TableConditional<'a>
    where
        Self: 'a;
    type Pair<'a>
        = TablePair<'a>
    where
        Self: 'a;

    fn p(&self) -> usize {
        self.exact.space.p
    }

    fn grid(&self) -> &GridSpec {
        &self.exact.grid
    }

    fn log_joint(&self, state: &EnsembleState) -> Result<f64> {
        Ok(self.exact.log_probs[self.check(state)?])
    }

    fn conditional(&self, state: &EnsembleState, l: usize) -> Result<TableConditional<'_>> {
        Ok(TableConditional {
            exact: self.exact,
            base: self.base_without(state, &[l])?,
            stride: self.exact.space.stride(l),
        })
    }

    fn pair(&self, state: &EnsembleState, m: usize, n: usize) -> Result<TablePair<'_>> {
        if m == n {
            return Err(AgpError::InvalidParameter(
                "pair conditional needs two distinct components".into(),
            ));
        }
        let space = &self.exact.space;
        Ok(TablePair {
            exact: self.exact,
            base: self.base_without(state, &[m, n])?,
            stride_m: space.stride(m),
            stride_n: space.stride(n),
        })
    }
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AgpError::DimensionMismatch(format!(
            "distributions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// TV distance between the visit frequencies of `chain` (state indices) and
/// the exact posterior.
pub fn check_stationarity(chain: &[usize], exact: &ExactPosterior) -> Result<f64> {
    if chain.len() < MIN_CHAIN {
        return Err(AgpError::ChainTooShort {
            len: chain.len(),
            min: MIN_CHAIN,
        });
    }
    let mut freq = vec![0.0; exact.n_states()];
    for &s in chain {
        let slot = freq.get_mut(s).ok_or_else(|| {
            AgpError::InvalidParameter(format!("state index {s} outside the enumerated space"))
        })?;
        *slot += 1.0;
    }
    let n = chain.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    total_variation(&freq, &exact.probs())
}

/// Runs `steps` ensemble sweeps at fixed `tau`, active set and importance
/// scores, returning the visited state indices.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain<T: Target>(
    target: &T,
    exact: &ExactPosterior,
    initial: EnsembleState,
    steps: usize,
    dmtm: &DmtmParams,
    icm: &IcmParams,
    icm_prob: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        ensemble_sweep(target, &mut state, dmtm, icm, icm_prob, None, &mut rng)?;
        out.push(exact.index(&state)?);
    }
    Ok(out)
}

/// One ordered state pair of a flux check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxRow {
    pub from: usize,
    pub to: usize,
    /// `pi(from) w(from) T(from, to)` estimated from trials.
    pub forward: f64,
    /// `pi(to) w'(to) T'(to, from)` for the paired reverse kernel.
    pub reverse: f64,
    pub z: f64,
}

/// Outcome of a detailed-balance check for one move kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub kind: MoveKind,
    pub reverse_kind: MoveKind,
    pub trials: usize,
    pub rows: Vec<FluxRow>,
    pub max_abs_z: f64,
    /// Pairs with `|z| > 3`.
    pub flagged: usize,
    /// Two-sided [`FAMILY_ALPHA`] threshold, Bonferroni-corrected over the tested pairs.
    pub bonferroni_z: f64,
    pub bonferroni_flagged: usize,
}

impl BalanceReport {
    /// No pair beyond the Bonferroni-corrected threshold. With thousands of
    /// tested pairs a correct kernel still shows a few `|z| > 3` by chance,
    /// so the raw count is reported alongside rather than gated on.
    pub fn passes(&self) -> bool {
        self.bonferroni_flagged == 0
    }

    /// The report as CSV (`from,to,forward,reverse,z`).
    pub fn to_csv(&self, labels: impl Fn(usize) -> String) -> String {
        let mut s = String::from("from,to,forward,reverse,z\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{:.4}\n",
                labels(r.from),
                labels(r.to),
                r.forward,
                r.reverse,
                r.z
            ));
        }
        s
    }
}

/// Transition counts out of each source state.
type Counts = Vec<BTreeMap<usize, u64>>;

fn estimate<F>(n_states: usize, sources: &[usize], trials: usize, seed: u64, step: F) -> Result<Counts>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<usize> + Sync,
{
    let rows: Vec<(usize, BTreeMap<usize, u64>)> = sources
        .par_iter()
        .map(|&s| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
            let mut counts = BTreeMap::new();
            for _ in 0..trials {
                *counts.entry(step(s, &mut rng)?).or_insert(0) += 1;
            }
            Ok((s, counts))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![BTreeMap::new(); n_states];
    for (s, c) in rows {
        out[s] = c;
    }
    Ok(out)
}

/// Builds the flux table `pi(s) w(s) T(s, s')` vs `pi(s') w'(s') T'(s', s)`.
#[allow(clippy::too_many_arguments)]
fn flux_report(
    kind: MoveKind,
    reverse_kind: MoveKind,
    pi: &[f64],
    w_fwd: &[f64],
    w_rev: &[f64],
    fwd: &Counts,
    rev: &Counts,
    trials: usize,
) -> BalanceReport {
    let symmetric = kind == reverse_kind;
    let mut pairs = BTreeSet::new();
    for (s, row) in fwd.iter().enumerate() {
        pairs.extend(row.keys().filter(|&&t| t != s).map(|&t| (s, t)));
    }
    for (t, row) in rev.iter().enumerate() {
        pairs.extend(row.keys().filter(|&&s| s != t).map(|&s| (s, t)));
    }
    if symmetric {
        pairs = pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    }
    let n = trials as f64;
    let mut rows = Vec::new();
    for (s, t) in pairs {
        let cf = fwd[s].get(&t).copied().unwrap_or(0) as f64;
        let cr = rev[t].get(&s).copied().unwrap_or(0) as f64;
        let (mf, mr) = (pi[s] * w_fwd[s], pi[t] * w_rev[t]);
        let forward = mf * cf / n;
        let reverse = mr * cr / n;
        // binomial variances evaluated at the pooled flux
        let pooled = 0.5 * (forward + reverse);
        let var = |m: f64| {
            if m > 0.0 {
                let q = (pooled / m).clamp(0.0, 1.0);
                m * m * q * (1.0 - q) / n
            } else {
                0.0
            }
        };
        let se = (var(mf) + var(mr)).sqrt();
        let z = if se > 0.0 {
            (forward - reverse) / se
        } else if forward == reverse {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(FluxRow {
            from: s,
            to: t,
            forward,
            reverse,
            z,
        });
    }
    let m = rows.len().max(1) as f64;
    let bonferroni_z = Normal::standard().inverse_cdf(1.0 - FAMILY_ALPHA / (2.0 * m));
    BalanceReport {
        kind,
        reverse_kind,
        trials,
        max_abs_z: rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max),
        flagged: rows.iter().filter(|r| r.z.abs() > Z_FLAG).count(),
        bonferroni_flagged: rows.iter().filter(|r| r.z.abs() > bonferroni_z).count(),
        bonferroni_z,
        rows,
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(AgpError::InvalidParameter(format!(
            "flux checks need at least {MIN_TRIALS} trials per source state, got {trials}"
        )));
    }
    Ok(())
}

/// Detailed balance of the paired-move DMTM kernel on the collapsed space of
/// a single component's inclusion vector.
///
/// `pi(gamma)` sums the exact posterior over grid cells; moves of `kind` from
/// `gamma` are balanced against moves of the paired reverse kind, each
/// weighted by its size-dependent schedule probability.
pub fn check_dmtm_balance<T: Target + Sync>(
    target: &T,
    exact: &ExactPosterior,
    kind: MoveKind,
    params: &DmtmParams,
    trials: usize,
    seed: u64,
) -> Result<BalanceReport> {
    check_trials(trials)?;
    if exact.space.k != 1 || kind.is_inter_component() {
        return Err(AgpError::InvalidParameter(
            "DMTM balance is checked for a single component and Add/Remove/Swap".into(),
        ));
    }
    let p = exact.space.p;
    let codes = 1usize << p;
    let pi = exact.gamma_marginal();
    let weights = |k: MoveKind| -> Result<Vec<f64>> {
        (0..codes)
            .map(|c| Ok(move_weights(c.count_ones() as usize, p, &params.schedule)?.get(k)))
            .collect()
    };
    let reverse_kind = kind.paired_reverse();
    let run = |k: MoveKind, w: &[f64], salt: u64| -> Result<Counts> {
        let sources: Vec<usize> = (0..codes).filter(|&c| w[c] > 0.0).collect();
        estimate(codes, &sources, trials, derive_seed(seed, salt), |code, rng| {
            let mut state =
                EnsembleState::with_components(vec![ComponentState::empty(p)], exact.tau)?;
            state.components_mut()[0].gamma = gamma_from_code(p, code);
            let mut cond = target.conditional(&state, 0)?;
            dmtm_update(&mut cond, &mut state, 0, Some(k), params, rng)?;
            Ok(gamma_code(&state.component(0).gamma))
        })
    };
    let (w_fwd, w_rev) = (weights(kind)?, weights(reverse_kind)?);
    let fwd = run(kind, &w_fwd, 1)?;
    let rev = if reverse_kind == kind {
        fwd.clone()
    } else {
        run(reverse_kind, &w_rev, 2)?
    };
    Ok(flux_report(kind, reverse_kind, &pi, &w_fwd, &w_rev, &fwd, &rev, trials))
}

/// Detailed balance of one inter-component move kind on the full joint
/// space of a two-component posterior.
pub fn check_icm_balance<T: Target + Sync>(
    target: &T,
    exact: &ExactPosterior,
    kind: MoveKind,
    params: &IcmParams,
    trials: usize,
    seed: u64,
) -> Result<BalanceReport> {
    check_trials(trials)?;
    if exact.space.k != 2 || !kind.is_inter_component() {
        return Err(AgpError::InvalidParameter(
            "ICM balance is checked for two components and CD/PD/PS".into(),
        ));
    }
    let slot = [MoveKind::CrossDonate, MoveKind::PairedDonate, MoveKind::PairedSwap]
        .iter()
        .position(|&k| k == kind)
        .expect("inter-component kind");
    let n = exact.n_states();
    let w: Vec<f64> = (0..n)
        .map(|s| icm_kind_weights(&exact.state(s), params)[slot])
        .collect();
    let pi = exact.probs();
    let sources: Vec<usize> = (0..n).filter(|&s| w[s] > 0.0).collect();
    let counts = estimate(n, &sources, trials, seed, |s, rng| {
        let mut state = exact.state(s);
        icm_step_with_kind(target, &mut state, kind, params, rng)?;
        exact.index(&state)
    })?;
    Ok(flux_report(kind, kind, &pi, &w, &w, &counts, &counts, trials))
}
