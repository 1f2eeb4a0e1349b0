//! Transition kernels: paired-move discrete multiple-try Metropolis for
//! inclusion vectors, griddy-Gibbs scale draws, inter-component moves and the
//! master sampling loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgpError, Result};
use crate::inference::sample_sigma2;
use crate::linalg::log_sum_exp;
use crate::model::{Conditional, ModelTarget, PairConditional, Target};
use crate::priors::{
    component_bounds, move_weights, sample_tau, GridCell, InclusionPrior, MoveKind, MoveSchedule,
};
use crate::state::{
    update_active_set, update_importance_component, ChainRecord, ComponentState, EnsembleState,
    InclusionVector,
};

/// Deliberate acceptance-ratio bugs used to show the balance checks have teeth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutation {
    #[default]
    None,
    /// Omit `w_m'(|gamma'|) / w_m(|gamma|)`.
    DropWRatio,
    /// Omit `omega(s*; m') / omega(s*; m)`.
    DropOmegaRatio,
    /// Build the reverse neighborhood without forcing the origin into it.
    WrongReverse,
}

impl Mutation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mutation::None),
            "drop-w-ratio" => Ok(Mutation::DropWRatio),
            "drop-omega-ratio" => Ok(Mutation::DropOmegaRatio),
            "wrong-reverse" => Ok(Mutation::WrongReverse),
            other => Err(AgpError::InvalidParameter(format!(
                "unknown mutation '{other}' (expected none, drop-w-ratio, drop-omega-ratio, wrong-reverse)"
            ))),
        }
    }
}

/// Settings of the paired-move DMTM kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DmtmParams {
    /// Target neighborhood budget `M`.
    pub budget: usize,
    /// Inclusion-bias exponent of the toggle weights.
    pub alpha_incl: f64,
    pub schedule: MoveSchedule,
    /// Include every toggle (`f = 1`), i.e. full paired neighborhoods.
    pub deterministic: bool,
    pub mutation: Mutation,
}

impl DmtmParams {
    pub fn new(budget: usize, alpha_incl: f64) -> Self {
        Self {
            budget: budget.max(1),
            alpha_incl,
            schedule: MoveSchedule::default(),
            deterministic: false,
            mutation: Mutation::None,
        }
    }
}

/// `f(v; M) = M v^alpha / (M v^alpha + p)`.
pub fn toggle_weight(v: f64, budget: usize, p: usize, alpha: f64) -> f64 {
    let a = budget as f64 * v.powf(alpha);
    a / (a + p as f64)
}

/// Probability that predictor `j` is toggled into the neighborhood of `move_kind`.
pub fn toggle_inclusion_probability(
    j: usize,
    gamma: &InclusionVector,
    v: &[f64],
    budget: usize,
    alpha: f64,
    move_kind: MoveKind,
) -> f64 {
    let p = gamma.len();
    let included = gamma.contains(j);
    match move_kind {
        MoveKind::Add if !included => toggle_weight(v[j], budget, p, alpha),
        MoveKind::Remove if included => 1.0,
        MoveKind::Swap if included => 1.0,
        MoveKind::Swap if gamma.size() > 0 => toggle_weight(v[j], budget, p, alpha) / gamma.size() as f64,
        _ => 0.0,
    }
}

/// Draws an index with probability proportional to `exp(log_w)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(AgpError::NonFinite("categorical weights".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(w.iter().rposition(|&x| x > 0.0).unwrap_or(0))
}

#[derive(Debug, Clone, Copy)]
enum Toggle {
    Add(usize),
    Remove(usize),
    Swap { out: usize, into: usize },
}

fn toggle_prob(v: f64, params: &DmtmParams, p: usize) -> f64 {
    if params.deterministic {
        1.0
    } else {
        toggle_weight(v, params.budget, p, params.alpha_incl)
    }
}

fn swap_prob(v: f64, params: &DmtmParams, p: usize, d: usize) -> f64 {
    if params.deterministic {
        1.0
    } else {
        toggle_prob(v, params, p) / d as f64
    }
}

/// Candidate inclusion vectors of one paired neighborhood; `forced` joins the
/// toggle set regardless of its Bernoulli draw.
fn neighborhood<R: Rng + ?Sized>(
    gamma: &InclusionVector,
    kind: MoveKind,
    v: &[f64],
    params: &DmtmParams,
    forced: Option<usize>,
    rng: &mut R,
) -> Vec<(InclusionVector, Toggle)> {
    let p = gamma.len();
    let mut out = Vec::new();
    match kind {
        MoveKind::Add => {
            for j in 0..p {
                if gamma.contains(j) {
                    continue;
                }
                let hit = rng.random::<f64>() < toggle_prob(v[j], params, p);
                if hit || forced == Some(j) {
                    let mut g = gamma.clone();
                    g.toggle_in_place(j).expect("index in range");
                    out.push((g, Toggle::Add(j)));
                }
            }
        }
        MoveKind::Remove => {
            for j in gamma.iter() {
                let mut g = gamma.clone();
                g.toggle_in_place(j).expect("index in range");
                out.push((g, Toggle::Remove(j)));
            }
        }
        MoveKind::Swap => {
            let d = gamma.size();
            if d == 0 {
                return out;
            }
            let mut adds = Vec::new();
            for a in 0..p {
                if gamma.contains(a) {
                    continue;
                }
                let hit = rng.random::<f64>() < swap_prob(v[a], params, p, d);
                if hit || forced == Some(a) {
                    adds.push(a);
                }
            }
            for r in gamma.iter() {
                for &a in &adds {
                    let mut g = gamma.clone();
                    g.toggle_in_place(r).expect("index in range");
                    g.toggle_in_place(a).expect("index in range");
                    out.push((g, Toggle::Swap { out: r, into: a }));
                }
            }
        }
        _ => {}
    }
    out
}

/// Result of one within-component move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub kind: MoveKind,
    /// False when the forward neighborhood came out empty.
    pub proposed: bool,
    pub accepted: bool,
}

/// Paired-move DMTM update of component `l` scored by `cond`; draws the move
/// kind from the size-dependent schedule unless `forced_kind` is given.
pub fn dmtm_update<C: Conditional, R: Rng + ?Sized>(
    cond: &mut C,
    state: &mut EnsembleState,
    l: usize,
    forced_kind: Option<MoveKind>,
    params: &DmtmParams,
    rng: &mut R,
) -> Result<StepOutcome> {
    let gamma = state.component(l).gamma.clone();
    let p = gamma.len();
    let d = gamma.size();
    let w = move_weights(d, p, &params.schedule)?;
    let kind = match forced_kind {
        Some(k) => k,
        None => {
            let u = rng.random::<f64>();
            if u < w.add {
                MoveKind::Add
            } else if u < w.add + w.remove {
                MoveKind::Remove
            } else {
                MoveKind::Swap
            }
        }
    };
    if w.get(kind) <= 0.0 && forced_kind.is_none() {
        return Err(AgpError::InvalidParameter(format!(
            "move {kind:?} drawn with zero probability"
        )));
    }
    let v = state.importance().to_vec();
    let forward = neighborhood(&gamma, kind, &v, params, None, rng);
    if forward.is_empty() {
        return Ok(StepOutcome {
            kind,
            proposed: false,
            accepted: false,
        });
    }
    let fwd_scores = forward
        .iter()
        .map(|(g, _)| cond.score(g))
        .collect::<Result<Vec<_>>>()?;
    let pick = sample_log_categorical(&fwd_scores, rng)?;
    let (new_gamma, toggle) = forward[pick].clone();
    let reverse_kind = kind.paired_reverse();
    let d_new = new_gamma.size();
    let w_new = move_weights(d_new, p, &params.schedule)?;

    let (log_omega_fwd, log_omega_rev, forced) = match toggle {
        Toggle::Add(k) => (toggle_prob(v[k], params, p).ln(), 0.0, None),
        Toggle::Remove(r) => (0.0, toggle_prob(v[r], params, p).ln(), Some(r)),
        Toggle::Swap { out, into } => (
            swap_prob(v[into], params, p, d).ln(),
            swap_prob(v[out], params, p, d_new).ln(),
            Some(out),
        ),
    };
    let forced = if params.mutation == Mutation::WrongReverse {
        None
    } else {
        forced
    };
    let reverse = neighborhood(&new_gamma, reverse_kind, &v, params, forced, rng);
    let rev_scores = reverse
        .iter()
        .map(|(g, _)| cond.score(g))
        .collect::<Result<Vec<_>>>()?;
    let mut log_alpha = log_sum_exp(&fwd_scores) - log_sum_exp(&rev_scores);
    if params.mutation != Mutation::DropWRatio {
        log_alpha += w_new.get(reverse_kind).ln() - w.get(kind).ln();
    }
    if params.mutation != Mutation::DropOmegaRatio {
        log_alpha += log_omega_rev - log_omega_fwd;
    }
    let accepted = rng.random::<f64>().ln() < log_alpha;
    if accepted {
        state.components_mut()[l].gamma = new_gamma;
    }
    Ok(StepOutcome {
        kind,
        proposed: true,
        accepted,
    })
}

/// Exact draw of `(rho_l, lambda_l)` from its grid conditional given `gamma_l`.
pub fn griddy_update<C: Conditional, R: Rng + ?Sized>(
    cond: &mut C,
    state: &mut EnsembleState,
    l: usize,
    grid_cells: usize,
    rng: &mut R,
) -> Result<usize> {
    let cells = cond.cells(&state.component(l).gamma)?;
    debug_assert_eq!(cells.len(), grid_cells);
    sample_log_categorical(&cells, rng)
}

/// Paired-move DMTM step for component `l`.
pub fn paired_dmtm_step<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    l: usize,
    params: &DmtmParams,
    rng: &mut R,
) -> Result<StepOutcome> {
    let mut cond = target.conditional(state, l)?;
    dmtm_update(&mut cond, state, l, None, params, rng)
}

/// Griddy-Gibbs draw of component `l`'s scales.
pub fn griddy_gibbs_scales<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    l: usize,
    rng: &mut R,
) -> Result<GridCell> {
    let mut cond = target.conditional(state, l)?;
    let idx = griddy_update(&mut cond, state, l, target.grid().n_cells(), rng)?;
    let cell = target.grid().cell(idx);
    state.components_mut()[l].cell = cell;
    Ok(cell)
}

/// DMTM move followed by a scale draw, sharing one conditional.
pub fn component_update<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    l: usize,
    forced_kind: Option<MoveKind>,
    params: &DmtmParams,
    rng: &mut R,
) -> Result<StepOutcome> {
    let mut cond = target.conditional(state, l)?;
    let out = dmtm_update(&mut cond, state, l, forced_kind, params, rng)?;
    let idx = griddy_update(&mut cond, state, l, target.grid().n_cells(), rng)?;
    state.components_mut()[l].cell = target.grid().cell(idx);
    Ok(out)
}

/// Mixture weights of the inter-component moves (CD, PD, PS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcmParams {
    pub weights: [f64; 3],
}

impl Default for IcmParams {
    fn default() -> Self {
        Self {
            weights: [1.0 / 3.0; 3],
        }
    }
}

const ICM_KINDS: [MoveKind; 3] = [MoveKind::CrossDonate, MoveKind::PairedDonate, MoveKind::PairedSwap];

/// Kind probabilities at `state`, renormalized over the feasible kinds.
pub fn icm_kind_weights(state: &EnsembleState, params: &IcmParams) -> [f64; 3] {
    let n_active = state.active().len();
    let n_nonempty = state.nonempty_active().len();
    let feasible = [
        n_nonempty >= 1 && n_active >= 2,
        n_nonempty >= 1 && n_active >= 2,
        n_nonempty >= 2,
    ];
    let mut w = [0.0; 3];
    for i in 0..3 {
        if feasible[i] {
            w[i] = params.weights[i];
        }
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for x in &mut w {
            *x /= total;
        }
    }
    w
}

fn kind_weight(state: &EnsembleState, params: &IcmParams, kind: MoveKind) -> f64 {
    let i = ICM_KINDS.iter().position(|&k| k == kind).expect("ICM kind");
    icm_kind_weights(state, params)[i]
}

/// Result of one inter-component move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcmOutcome {
    /// `None` when no ICM kind was feasible.
    pub kind: Option<MoveKind>,
    pub proposed: bool,
    pub accepted: bool,
}

fn uniform_pick<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> usize {
    items[rng.random_range(0..items.len())]
}

fn with_bit(g: &InclusionVector, j: usize) -> InclusionVector {
    let mut g = g.clone();
    g.toggle_in_place(j).expect("index in range");
    g
}

/// Inter-component move with the kind drawn from the mixture weights.
pub fn icm_step<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    params: &IcmParams,
    rng: &mut R,
) -> Result<IcmOutcome> {
    let w = icm_kind_weights(state, params);
    if w.iter().sum::<f64>() <= 0.0 {
        return Ok(IcmOutcome {
            kind: None,
            proposed: false,
            accepted: false,
        });
    }
    let idx = sample_log_categorical(&w.map(f64::ln), rng)?;
    icm_step_with_kind(target, state, ICM_KINDS[idx], params, rng)
}

/// Inter-component move of a given kind (no-op if infeasible).
pub fn icm_step_with_kind<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    kind: MoveKind,
    params: &IcmParams,
    rng: &mut R,
) -> Result<IcmOutcome> {
    let w_kind = kind_weight(state, params, kind);
    let none = IcmOutcome {
        kind: Some(kind),
        proposed: false,
        accepted: false,
    };
    if w_kind <= 0.0 {
        return Ok(none);
    }
    let proposal = match kind {
        MoveKind::CrossDonate => cross_donate(target, state, rng)?,
        MoveKind::PairedDonate => paired_donate(target, state, rng)?,
        MoveKind::PairedSwap => paired_swap(target, state, rng)?,
        other => {
            return Err(AgpError::InvalidParameter(format!(
                "{other:?} is not an inter-component move"
            )))
        }
    };
    let Some((new_state, mut log_alpha)) = proposal else {
        return Ok(none);
    };
    log_alpha += kind_weight(&new_state, params, kind).ln() - w_kind.ln();
    let accepted = rng.random::<f64>().ln() < log_alpha;
    if accepted {
        *state = new_state;
    }
    Ok(IcmOutcome {
        kind: Some(kind),
        proposed: true,
        accepted,
    })
}

type Proposal = Option<(EnsembleState, f64)>;

/// Log joint of every cross-donation out of `donor`, scales fixed.
fn cd_neighborhood<T: Target>(
    target: &T,
    state: &EnsembleState,
    donor: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    let comps = state.components();
    let gn = &comps[donor].gamma;
    let mut out = Vec::new();
    for &m in state.active() {
        if m == donor {
            continue;
        }
        let gm = &comps[m].gamma;
        let movable: Vec<usize> = gn.iter().filter(|&j| !gm.contains(j)).collect();
        if movable.is_empty() {
            continue;
        }
        let mut pair = target.pair(state, m, donor)?;
        for j in movable {
            let s = pair.cell(&with_bit(gm, j), &with_bit(gn, j), comps[m].cell, comps[donor].cell)?;
            out.push((j, m, s));
        }
    }
    Ok(out)
}

fn cross_donate<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &EnsembleState,
    rng: &mut R,
) -> Result<Proposal> {
    let ne = state.nonempty_active();
    let donor = uniform_pick(&ne, rng);
    let fwd = cd_neighborhood(target, state, donor)?;
    if fwd.is_empty() {
        return Ok(None);
    }
    let fwd_scores: Vec<f64> = fwd.iter().map(|c| c.2).collect();
    let (j, m, _) = fwd[sample_log_categorical(&fwd_scores, rng)?];
    let mut next = state.clone();
    let gm = with_bit(&state.component(m).gamma, j);
    let gn = with_bit(&state.component(donor).gamma, j);
    next.components_mut()[m].gamma = gm;
    next.components_mut()[donor].gamma = gn;
    let rev = cd_neighborhood(target, &next, m)?;
    let rev_scores: Vec<f64> = rev.iter().map(|c| c.2).collect();
    let ne_next = next.nonempty_active().len();
    let log_alpha = log_sum_exp(&fwd_scores) - log_sum_exp(&rev_scores) + (ne.len() as f64).ln()
        - (ne_next as f64).ln();
    Ok(Some((next, log_alpha)))
}

/// Scores of all donations `donor -> recipient` over `G^2`, as
/// `(j, cell index pair, log joint)` with pair cells ordered (recipient, donor).
fn pd_neighborhood<P: PairConditional>(
    pair: &mut P,
    g_recipient: &InclusionVector,
    g_donor: &InclusionVector,
    flip: bool,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for j in g_donor.iter().filter(|&j| !g_recipient.contains(j)) {
        let gr = with_bit(g_recipient, j);
        let gd = with_bit(g_donor, j);
        let cells = if flip {
            pair.cells(&gd, &gr)?
        } else {
            pair.cells(&gr, &gd)?
        };
        for (c, s) in cells.into_iter().enumerate() {
            out.push((j, c, s));
        }
    }
    Ok(out)
}

fn paired_donate<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &EnsembleState,
    rng: &mut R,
) -> Result<Proposal> {
    let ne = state.nonempty_active();
    let donor = uniform_pick(&ne, rng);
    let others: Vec<usize> = state.active().iter().copied().filter(|&l| l != donor).collect();
    let recipient = uniform_pick(&others, rng);
    let g = target.grid().n_cells();
    // pair cells are indexed (recipient, donor) for the forward move
    let mut pair = target.pair(state, recipient, donor)?;
    let gm = state.component(recipient).gamma.clone();
    let gn = state.component(donor).gamma.clone();
    let fwd = pd_neighborhood(&mut pair, &gm, &gn, false)?;
    if fwd.is_empty() {
        return Ok(None);
    }
    let fwd_scores: Vec<f64> = fwd.iter().map(|c| c.2).collect();
    let (j, c, _) = fwd[sample_log_categorical(&fwd_scores, rng)?];
    let mut next = state.clone();
    next.set_component(recipient, ComponentState::new(with_bit(&gm, j), target.grid().cell(c / g)));
    next.set_component(donor, ComponentState::new(with_bit(&gn, j), target.grid().cell(c % g)));
    // reverse: the recipient donates back; same pair object, arguments flipped
    let rev = pd_neighborhood(
        &mut pair,
        &next.component(donor).gamma,
        &next.component(recipient).gamma,
        true,
    )?;
    let rev_scores: Vec<f64> = rev.iter().map(|c| c.2).collect();
    let ne_next = next.nonempty_active().len();
    let log_alpha = log_sum_exp(&fwd_scores) - log_sum_exp(&rev_scores) + (ne.len() as f64).ln()
        - (ne_next as f64).ln();
    Ok(Some((next, log_alpha)))
}

fn ps_neighborhood<P: PairConditional>(
    pair: &mut P,
    gm: &InclusionVector,
    gn: &InclusionVector,
) -> Result<Vec<(usize, usize, usize, f64)>> {
    let mut out = Vec::new();
    let from_m: Vec<usize> = gm.iter().filter(|&j| !gn.contains(j)).collect();
    let from_n: Vec<usize> = gn.iter().filter(|&k| !gm.contains(k)).collect();
    for &j in &from_m {
        for &k in &from_n {
            let gm2 = with_bit(&with_bit(gm, j), k);
            let gn2 = with_bit(&with_bit(gn, k), j);
            for (c, s) in pair.cells(&gm2, &gn2)?.into_iter().enumerate() {
                out.push((j, k, c, s));
            }
        }
    }
    Ok(out)
}

fn paired_swap<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &EnsembleState,
    rng: &mut R,
) -> Result<Proposal> {
    let ne = state.nonempty_active();
    let a = rng.random_range(0..ne.len());
    let mut b = rng.random_range(0..ne.len() - 1);
    if b >= a {
        b += 1;
    }
    let (m, n) = (ne[a.min(b)], ne[a.max(b)]);
    let g = target.grid().n_cells();
    let mut pair = target.pair(state, m, n)?;
    let gm = state.component(m).gamma.clone();
    let gn = state.component(n).gamma.clone();
    let fwd = ps_neighborhood(&mut pair, &gm, &gn)?;
    if fwd.is_empty() {
        return Ok(None);
    }
    let fwd_scores: Vec<f64> = fwd.iter().map(|c| c.3).collect();
    let (j, k, c, _) = fwd[sample_log_categorical(&fwd_scores, rng)?];
    let mut next = state.clone();
    let gm2 = with_bit(&with_bit(&gm, j), k);
    let gn2 = with_bit(&with_bit(&gn, k), j);
    next.set_component(m, ComponentState::new(gm2.clone(), target.grid().cell(c / g)));
    next.set_component(n, ComponentState::new(gn2.clone(), target.grid().cell(c % g)));
    let rev = ps_neighborhood(&mut pair, &gm2, &gn2)?;
    let rev_scores: Vec<f64> = rev.iter().map(|c| c.3).collect();
    Ok(Some((next, log_sum_exp(&fwd_scores) - log_sum_exp(&rev_scores))))
}

/// What happened during one ensemble sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub icm: Option<IcmOutcome>,
    pub dmtm: Vec<StepOutcome>,
}

/// One transition of the master loop with `I_A`, `tau` and the importance
/// scores held fixed (importance is updated when `zeta` is given).
///
/// With probability `icm_prob` an inter-component move is attempted, followed
/// by a scale sweep over `I_A` unless a paired donate/swap was accepted.
/// Otherwise every active component gets a DMTM move and a scale draw.
pub fn ensemble_sweep<T: Target, R: Rng + ?Sized>(
    target: &T,
    state: &mut EnsembleState,
    dmtm: &DmtmParams,
    icm: &IcmParams,
    icm_prob: f64,
    zeta: Option<f64>,
    rng: &mut R,
) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let active = state.active().to_vec();
    if rng.random::<f64>() < icm_prob {
        let res = icm_step(target, state, icm, rng)?;
        let rescale = !res.accepted || res.kind == Some(MoveKind::CrossDonate);
        out.icm = Some(res);
        if rescale {
            for &l in &active {
                griddy_gibbs_scales(target, state, l, rng)?;
            }
        }
    } else {
        for &l in &active {
            out.dmtm.push(component_update(target, state, l, None, dmtm, rng)?);
            if let Some(z) = zeta {
                update_importance_component(state, l, z)?;
            }
        }
    }
    Ok(out)
}

/// Sampler settings; defaults follow the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Chain length `T`.
    pub iterations: usize,
    /// Records discarded before summaries.
    pub burn_in: usize,
    /// Stride of retained records.
    pub thin: usize,
    /// Inclusion-bias exponent `alpha`.
    pub alpha_incl: f64,
    /// Probability `Delta` of an inter-component move.
    pub icm_prob: f64,
    pub icm_weights: [f64; 3],
    /// Learning-rate exponent of importance adaptation.
    pub zeta: f64,
    pub adapt_importance: bool,
    /// Likelihood budget `B`; `None` means `10 k_max`.
    pub budget: Option<usize>,
    /// Prior expected component size.
    pub d_star: f64,
    pub schedule: MoveSchedule,
    /// Overrides of `(k_min, k_max)`.
    pub k_bounds: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            burn_in: 200,
            thin: 4,
            alpha_incl: 1.5,
            icm_prob: 0.20,
            icm_weights: [1.0 / 3.0; 3],
            zeta: 2.0 / 3.0,
            adapt_importance: true,
            budget: None,
            d_star: 1.0,
            schedule: MoveSchedule::default(),
            k_bounds: None,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgpError::InvalidParameter(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.thin < 1 {
            return bad("thinning stride must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.icm_prob) {
            return bad("ICM probability must lie in [0, 1]");
        }
        if !(self.alpha_incl >= 0.0 && self.alpha_incl.is_finite()) {
            return bad("inclusion-bias exponent must be >= 0");
        }
        if self.icm_weights.iter().any(|&w| !(w >= 0.0)) || self.icm_weights.iter().sum::<f64>() <= 0.0 {
            return bad("ICM weights must be nonnegative with a positive sum");
        }
        if !(self.zeta > 0.5 && self.zeta <= 1.0) {
            return bad("zeta must lie in (1/2, 1]");
        }
        if self.budget == Some(0) {
            return bad("budget must be >= 1");
        }
        if let Some((lo, hi)) = self.k_bounds {
            if lo < 1 || lo > hi {
                return bad("component bounds need 1 <= k_min <= k_max");
            }
        }
        self.schedule.validate()
    }

    /// Resolved `(k_min, k_max)` for `p` predictors.
    pub fn bounds(&self, p: usize) -> Result<(usize, usize)> {
        match self.k_bounds {
            Some(b) => Ok(b),
            None => component_bounds(p),
        }
    }

    /// Resolved budget `B`.
    pub fn resolved_budget(&self, k_max: usize) -> usize {
        self.budget.unwrap_or(10 * k_max)
    }

    /// Importance burn-in `b_0 = max(100, floor(T / 10))`.
    pub fn importance_burn_in(&self) -> usize {
        (self.iterations / 10).max(100)
    }
}

/// Acceptance counters of a chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub dmtm_proposed: usize,
    pub dmtm_accepted: usize,
    pub icm_proposed: [usize; 3],
    pub icm_accepted: [usize; 3],
}

impl ChainStats {
    fn absorb(&mut self, sweep: &SweepOutcome) {
        for s in &sweep.dmtm {
            self.dmtm_proposed += s.proposed as usize;
            self.dmtm_accepted += s.accepted as usize;
        }
        if let Some(IcmOutcome {
            kind: Some(kind),
            proposed,
            accepted,
        }) = sweep.icm
        {
            let i = ICM_KINDS.iter().position(|&k| k == kind).expect("ICM kind");
            self.icm_proposed[i] += proposed as usize;
            self.icm_accepted[i] += accepted as usize;
        }
    }
}

/// Raw chain plus counters.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub records: Vec<ChainRecord>,
    pub stats: ChainStats,
    pub final_state: EnsembleState,
}

/// Runs the full sampler: active-set update, `tau` draw, ICM or per-component
/// DMTM with scale draws and importance adaptation, and a `sigma^2` draw.
pub fn run_chain<R: Rng + ?Sized>(
    target: &ModelTarget,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainOutput> {
    config.validate()?;
    let p = target.p();
    let (k_min, k_max) = config.bounds(p)?;
    let prior = InclusionPrior::new(config.d_star, p)?;
    let budget = config.resolved_budget(k_max);
    let mut state = EnsembleState::new(p, k_max, k_min, config.importance_burn_in(), prior.omega());
    let icm = IcmParams {
        weights: config.icm_weights,
    };
    let mut records = Vec::with_capacity(config.iterations);
    let mut stats = ChainStats::default();
    for t in 1..=config.iterations {
        let step = |state: &mut EnsembleState, rng: &mut R| -> Result<(SweepOutcome, f64)> {
            state.set_iteration(t);
            let plan = update_active_set(state, budget, rng)?;
            let tau = sample_tau(state, &prior, rng)?;
            state.set_tau(tau);
            let mut dmtm = DmtmParams::new(plan.per_component, config.alpha_incl);
            dmtm.schedule = config.schedule;
            let zeta = config.adapt_importance.then_some(config.zeta);
            let sweep = ensemble_sweep(target, state, &dmtm, &icm, config.icm_prob, zeta, rng)?;
            let sigma2 = sample_sigma2(target, state, rng)?;
            Ok((sweep, sigma2))
        };
        let (sweep, sigma2) = step(&mut state, rng).map_err(|e| AgpError::Sampler {
            iteration: t,
            source: Box::new(e),
        })?;
        stats.absorb(&sweep);
        records.push(ChainRecord::from_state(&state, target.grid(), Some(sigma2)));
    }
    Ok(ChainOutput {
        records,
        stats,
        final_state: state,
    })
}

/// Post burn-in, thinned records.
pub fn retained(records: &[ChainRecord], burn_in: usize, thin: usize) -> Vec<&ChainRecord> {
    records
        .iter()
        .skip(burn_in)
        .step_by(thin.max(1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::MarginalScale;
    use crate::priors::default_grids;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::HashMap;

    /// Conditional over explicit scores, for hand-checkable kernels.
    struct TableCond(HashMap<Vec<usize>, f64>);

    impl Conditional for TableCond {
        fn cells(&mut self, gamma: &InclusionVector) -> Result<Vec<f64>> {
            Ok(vec![self.0[&gamma.indices()]])
        }
    }

    fn single_state(p: usize, idx: &[usize]) -> EnsembleState {
        let c = ComponentState::new(InclusionVector::from_indices(p, idx).unwrap(), GridCell::new(0, 0));
        EnsembleState::with_components(vec![c], 0.5).unwrap()
    }

    #[test]
    fn toggle_probabilities() {
        let g = InclusionVector::from_indices(4, &[0, 1]).unwrap();
        let v = [1.0, 1.0, 1.0, 5.0];
        assert_eq!(toggle_inclusion_probability(0, &g, &v, 4, 1.5, MoveKind::Add), 0.0);
        assert_eq!(toggle_inclusion_probability(2, &g, &v, 4, 1.5, MoveKind::Add), 0.5);
        assert_eq!(toggle_inclusion_probability(0, &g, &v, 4, 1.5, MoveKind::Remove), 1.0);
        assert_eq!(toggle_inclusion_probability(2, &g, &v, 4, 1.5, MoveKind::Remove), 0.0);
        assert_eq!(toggle_inclusion_probability(2, &g, &v, 4, 1.5, MoveKind::Swap), 0.25);
        let f3 = toggle_inclusion_probability(3, &g, &v, 4, 1.5, MoveKind::Add);
        assert!(f3 > 0.5);
    }

    #[test]
    fn toggle_weight_reference_values() {
        // p = 1000, B = 10 * 32, |I_A| = 10 gives M = 32
        let f5 = toggle_weight(5.0, 32, 1000, 1.5);
        let f10 = toggle_weight(10.0, 32, 1000, 1.5);
        assert!((f5 - 0.26).abs() < 0.005, "{f5}");
        assert!((f10 - 0.50).abs() < 0.005, "{f10}");
        // expected Add-neighborhood size at v = 1
        let m = 20;
        let p = 500;
        let expected: f64 = (0..p - 3).map(|_| toggle_weight(1.0, m, p, 1.5)).sum();
        assert!((expected - m as f64 * (p - 3) as f64 / (p + m) as f64).abs() < 1e-9);
        let ws: Vec<f64> = (1..20).map(|v| toggle_weight(v as f64, 10, 100, 1.2)).collect();
        assert!(ws.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lw = [0.0, 1.0f64.ln() + 1.0, f64::NEG_INFINITY, 2.0];
        let mut counts = [0usize; 4];
        let n = 200_000;
        for _ in 0..n {
            counts[sample_log_categorical(&lw, &mut rng).unwrap()] += 1;
        }
        let w: Vec<f64> = lw.iter().map(|x| x.exp()).collect();
        let tot: f64 = w.iter().sum();
        for i in 0..4 {
            let pi = w[i] / tot;
            let se = (pi * (1.0 - pi) / n as f64).sqrt();
            assert!((counts[i] as f64 / n as f64 - pi).abs() < 5.0 * se + 1e-12);
        }
    }

    /// Exact transition probability of the two-state chain p = 1 from `from`.
    #[test]
    fn two_state_chain_is_reversible() {
        let mut table: HashMap<Vec<usize>, f64> = HashMap::new();
        table.insert(vec![], 0.3);
        table.insert(vec![0], 1.7);
        let params = DmtmParams::new(1, 1.0);
        let sched = params.schedule;
        // 0 -> 1: Add (w=1) with f(1) = 1/2; forward {1}; reverse Remove {0}
        // alpha = min(1, w_R(1) * 1 * pi(1) / (w_A(0) * f * pi(0)))
        let w_r1 = move_weights(1, 1, &sched).unwrap().remove;
        let f = toggle_weight(1.0, 1, 1, 1.0);
        let pi0 = 0.3f64.exp();
        let pi1 = 1.7f64.exp();
        let a01 = (w_r1 * pi1 / (f * pi0)).min(1.0);
        let t01 = f * a01;
        // 1 -> 0: Remove w.p. w_R(1); reverse Add forced, omega = f
        let a10 = (f * pi0 / (w_r1 * pi1)).min(1.0);
        let t10 = w_r1 * a10;
        assert!((pi0 * t01 - pi1 * t10).abs() < 1e-12);
        // and the kernel realizes those probabilities
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 200_000;
        let mut moves = [0usize; 2];
        for (start, slot) in [(vec![], 0usize), (vec![0], 1usize)] {
            for _ in 0..trials {
                let mut s = single_state(1, &start);
                let mut cond = TableCond(table.clone());
                let out = dmtm_update(&mut cond, &mut s, 0, None, &params, &mut rng).unwrap();
                moves[slot] += out.accepted as usize;
            }
        }
        let se = |t: f64| (t * (1.0 - t) / trials as f64).sqrt();
        assert!((moves[0] as f64 / trials as f64 - t01).abs() < 5.0 * se(t01));
        assert!((moves[1] as f64 / trials as f64 - t10).abs() < 5.0 * se(t10));
    }

    #[test]
    fn deterministic_case_matches_full_neighborhood_acceptance() {
        // with every toggle on, accepted fraction from gamma = {0} under Add
        // equals sum over k of pi(k)/S_fwd * min(1, w_R(2) S_fwd / (w_A(1) S_rev(k)))
        let p = 3;
        let mut table: HashMap<Vec<usize>, f64> = HashMap::new();
        let scores = [
            (vec![], 0.0),
            (vec![0], 1.0),
            (vec![1], 0.2),
            (vec![2], -0.4),
            (vec![0, 1], 2.0),
            (vec![0, 2], 0.5),
            (vec![1, 2], 1.1),
            (vec![0, 1, 2], 0.7),
        ];
        for (k, v) in &scores {
            table.insert(k.clone(), *v);
        }
        let mut params = DmtmParams::new(1, 1.0);
        params.deterministic = true;
        let sched = params.schedule;
        let pi = |g: &[usize]| -> f64 { table[&g.to_vec()] };
        let pi = |g: &[usize]| pi(g).exp();
        let fwd = [vec![0usize, 1], vec![0, 2]];
        let s_fwd: f64 = fwd.iter().map(|g| pi(g)).sum();
        let w_a1 = move_weights(1, p, &sched).unwrap().add;
        let w_r2 = move_weights(2, p, &sched).unwrap().remove;
        let mut expected = 0.0;
        for g in &fwd {
            let s_rev: f64 = g.iter().map(|&r| pi(&g.iter().copied().filter(|&x| x != r).collect::<Vec<_>>())).sum();
            expected += pi(g) / s_fwd * (w_r2 * s_fwd / (w_a1 * s_rev)).min(1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 100_000;
        let mut acc = 0;
        for _ in 0..trials {
            let mut s = single_state(p, &[0]);
            let mut cond = TableCond(table.clone());
            acc += dmtm_update(&mut cond, &mut s, 0, Some(MoveKind::Add), &params, &mut rng)
                .unwrap()
                .accepted as usize;
        }
        let frac = acc as f64 / trials as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((frac - expected).abs() < 5.0 * se, "{frac} vs {expected}");
    }

    #[test]
    fn moves_change_size_as_documented() {
        let mut table: HashMap<Vec<usize>, f64> = HashMap::new();
        for mask in 0..16usize {
            let idx: Vec<usize> = (0..4).filter(|j| mask >> j & 1 == 1).collect();
            table.insert(idx, (mask as f64 * 0.37).sin());
        }
        let params = DmtmParams::new(4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [MoveKind::Add, MoveKind::Remove, MoveKind::Swap] {
            for _ in 0..500 {
                let start = [1usize, 3];
                let mut s = single_state(4, &start);
                let mut cond = TableCond(table.clone());
                let out = dmtm_update(&mut cond, &mut s, 0, Some(kind), &params, &mut rng).unwrap();
                let d = s.component(0).gamma.size();
                if out.accepted {
                    match kind {
                        MoveKind::Add => assert_eq!(d, 3),
                        MoveKind::Remove => assert_eq!(d, 1),
                        _ => assert_eq!(d, 2),
                    }
                } else {
                    assert_eq!(s.component(0).gamma.indices(), start.to_vec());
                }
            }
        }
    }

    fn toy_target(n: usize, p: usize, seed: u64) -> ModelTarget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let d = crate::data::Dataset::new(x, y, crate::data::XScaling::ZScore).unwrap();
        ModelTarget::new(d.x_std, d.y_std, default_grids(), MarginalScale::default()).unwrap()
    }

    #[test]
    fn griddy_prefers_signal_cells() {
        let t = toy_target(40, 2, 5);
        let mut s = single_state(2, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut positive = 0;
        for _ in 0..200 {
            let cell = griddy_gibbs_scales(&t, &mut s, 0, &mut rng).unwrap();
            positive += (!cell.is_null()) as usize;
        }
        assert!(positive > 190);
    }

    #[test]
    fn single_cell_grid_is_always_returned() {
        let base = toy_target(10, 2, 7);
        let grid = crate::priors::GridSpec::new(vec![0.0], vec![1.0], 0.0, 0.0).unwrap();
        let t = ModelTarget::new(base.x().clone(), base.y().clone(), grid, MarginalScale::default()).unwrap();
        let mut s = single_state(2, &[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            assert_eq!(griddy_gibbs_scales(&t, &mut s, 0, &mut rng).unwrap(), GridCell::new(0, 0));
        }
    }

    #[test]
    fn icm_moves_preserve_their_invariants() {
        let t = toy_target(15, 5, 9);
        let comps = vec![
            ComponentState::new(InclusionVector::from_indices(5, &[0, 1]).unwrap(), GridCell::new(2, 1)),
            ComponentState::new(InclusionVector::from_indices(5, &[2]).unwrap(), GridCell::new(3, 0)),
            ComponentState::new(InclusionVector::empty(5), GridCell::new(0, 0)),
        ];
        let start = EnsembleState::with_components(comps, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let total = |s: &EnsembleState| s.components().iter().map(|c| c.gamma.size()).sum::<usize>();
        for kind in ICM_KINDS {
            for _ in 0..30 {
                let mut s = start.clone();
                let out = icm_step_with_kind(&t, &mut s, kind, &IcmParams::default(), &mut rng).unwrap();
                assert_eq!(total(&s), total(&start));
                if kind == MoveKind::PairedSwap {
                    for l in 0..3 {
                        assert_eq!(s.component(l).gamma.size(), start.component(l).gamma.size());
                    }
                }
                if kind == MoveKind::CrossDonate {
                    for l in 0..3 {
                        assert_eq!(s.component(l).cell, start.component(l).cell);
                    }
                }
                if !out.accepted {
                    assert_eq!(s, start);
                }
            }
        }
    }

    #[test]
    fn icm_weights_renormalize_over_feasible_kinds() {
        let comps = vec![
            ComponentState::new(InclusionVector::from_indices(3, &[0]).unwrap(), GridCell::new(1, 0)),
            ComponentState::new(InclusionVector::empty(3), GridCell::new(0, 0)),
        ];
        let s = EnsembleState::with_components(comps, 0.2).unwrap();
        let w = icm_kind_weights(&s, &IcmParams::default());
        assert_eq!(w, [0.5, 0.5, 0.0]);
        let lone = EnsembleState::with_components(vec![ComponentState::empty(3)], 0.2).unwrap();
        assert_eq!(icm_kind_weights(&lone, &IcmParams::default()), [0.0; 3]);
    }

    #[test]
    fn run_chain_smoke() {
        let t = toy_target(30, 6, 11);
        let config = SamplerConfig {
            iterations: 1,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let out = run_chain(&t, &config, &mut rng).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert!(r.sigma2.unwrap() > 0.0 && r.tau > 0.0 && r.tau < 1.0);
        let (k_min, k_max) = component_bounds(6).unwrap();
        assert!(r.active.len() >= k_min && r.active.len() <= k_max);
    }

    #[test]
    fn zero_icm_probability_never_takes_icm_moves() {
        let t = toy_target(25, 5, 13);
        let config = SamplerConfig {
            iterations: 30,
            icm_prob: 0.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let out = run_chain(&t, &config, &mut rng).unwrap();
        assert_eq!(out.stats.icm_proposed, [0; 3]);
        assert!(out.stats.dmtm_proposed > 0);
    }

    #[test]
    fn chains_are_reproducible() {
        let t = toy_target(20, 4, 15);
        let config = SamplerConfig {
            iterations: 15,
            icm_prob: 0.5,
            ..SamplerConfig::default()
        };
        let a = run_chain(&t, &config, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let b = run_chain(&t, &config, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.icm_prob = 1.5;
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            thin: 0,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(SamplerConfig::default().resolved_budget(32), 320);
        assert_eq!(Mutation::parse("drop-w-ratio").unwrap(), Mutation::DropWRatio);
        assert!(Mutation::parse("bogus").is_err());
    }

    proptest::proptest! {
        #[test]
        fn remove_and_add_stay_reachable(p in 1usize..60, d in 0usize..60) {
            let d = d.min(p);
            let w = move_weights(d, p, &MoveSchedule::default()).unwrap();
            if d >= 1 { proptest::prop_assert!(w.remove > 0.0); }
            if d < p { proptest::prop_assert!(w.add > 0.0); }
        }
    }
}
