//! Ensemble state: inclusion vectors, component scales, the active index set and
//! adaptive predictor importance scores.
//!
//! Predictor and component indices are 0-based in this crate; persisted records
//! use 1-based predictor indices.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AgpError, Result};
use crate::priors::{GridCell, GridSpec};

/// Length-`p` binary vector marking the predictors a component depends on.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct InclusionVector {
    words: Vec<u64>,
    p: usize,
    size: usize,
}

impl InclusionVector {
    pub fn empty(p: usize) -> Self {
        Self {
            words: vec![0; p.div_ceil(64)],
            p,
            size: 0,
        }
    }

    pub fn from_indices(p: usize, indices: &[usize]) -> Result<Self> {
        let mut g = Self::empty(p);
        for &j in indices {
            if j >= p {
                return Err(AgpError::InvalidParameter(format!(
                    "predictor index {j} out of range for p = {p}"
                )));
            }
            if !g.contains(j) {
                g.flip(j);
            }
        }
        Ok(g)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut g = Self::empty(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                g.flip(j);
            }
        }
        g
    }

    /// Number of predictors `p`.
    pub fn len(&self) -> usize {
        self.p
    }

    /// Number of included predictors `d = |gamma|`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn contains(&self, j: usize) -> bool {
        j < self.p && (self.words[j / 64] >> (j % 64)) & 1 == 1
    }

    fn flip(&mut self, j: usize) {
        let mask = 1u64 << (j % 64);
        if self.words[j / 64] & mask != 0 {
            self.size -= 1;
        } else {
            self.size += 1;
        }
        self.words[j / 64] ^= mask;
    }

    /// Flips predictor `j` in place.
    pub fn toggle_in_place(&mut self, j: usize) -> Result<()> {
        if j >= self.p {
            return Err(AgpError::InvalidParameter(format!(
                "toggle index {j} out of range for p = {}",
                self.p
            )));
        }
        self.flip(j);
        Ok(())
    }

    /// Included predictors in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let tz = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(w * 64 + tz)
                }
            })
        })
    }

    /// Excluded predictors in increasing order.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| !self.contains(j)).collect()
    }

    pub fn complement(&self) -> Self {
        let mut c = Self::empty(self.p);
        for j in 0..self.p {
            if !self.contains(j) {
                c.flip(j);
            }
        }
        c
    }

    /// 1-based index list, as used in persisted files.
    pub fn to_one_based(&self) -> Vec<usize> {
        self.iter().map(|j| j + 1).collect()
    }

    pub fn from_one_based(p: usize, indices: &[usize]) -> Result<Self> {
        let zero: Vec<usize> = indices
            .iter()
            .map(|&j| {
                j.checked_sub(1).ok_or_else(|| {
                    AgpError::Data("predictor indices are 1-based; found 0".into())
                })
            })
            .collect::<Result<_>>()?;
        Self::from_indices(p, &zero)
    }
}

impl fmt::Debug for InclusionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gamma{:?}/{}", self.indices(), self.p)
    }
}

#[derive(Serialize, Deserialize)]
struct InclusionRepr {
    p: usize,
    indices: Vec<usize>,
}

impl Serialize for InclusionVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        InclusionRepr {
            p: self.p,
            indices: self.indices(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for InclusionVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = InclusionRepr::deserialize(d)?;
        InclusionVector::from_indices(r.p, &r.indices).map_err(serde::de::Error::custom)
    }
}

/// `tog(j, gamma)`: flips the inclusion of predictor `j` (0-based).
pub fn toggle(j: usize, gamma: &InclusionVector) -> Result<InclusionVector> {
    let mut g = gamma.clone();
    g.toggle_in_place(j)?;
    Ok(g)
}

/// One GP component: inclusion vector plus grid-valued scales.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentState {
    pub gamma: InclusionVector,
    pub cell: GridCell,
}

impl ComponentState {
    pub fn empty(p: usize) -> Self {
        Self {
            gamma: InclusionVector::empty(p),
            cell: GridCell::new(0, 0),
        }
    }

    pub fn new(gamma: InclusionVector, cell: GridCell) -> Self {
        Self { gamma, cell }
    }

    pub fn rho(&self, grid: &GridSpec) -> f64 {
        grid.rho(self.cell)
    }

    pub fn lambda(&self, grid: &GridSpec) -> f64 {
        grid.lambda(self.cell)
    }

    /// Counts towards `k_a`: `rho > 0` or `d > 0`.
    pub fn is_occupied(&self) -> bool {
        !self.cell.is_null() || !self.gamma.is_empty()
    }
}

/// Per-iteration budgets from the active-set update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Likelihood evaluations per iteration `B`.
    pub budget: usize,
    /// Per-component neighborhood budget `M = ceil(B / |I_A|)`.
    pub per_component: usize,
}

impl BudgetPlan {
    pub fn new(budget: usize, n_active: usize) -> Result<Self> {
        if budget == 0 || n_active == 0 {
            return Err(AgpError::InvalidParameter(format!(
                "budget {budget} and active count {n_active} must be positive"
            )));
        }
        Ok(Self {
            budget,
            per_component: budget.div_ceil(n_active).max(1),
        })
    }
}

/// Full sampler state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    components: Vec<ComponentState>,
    active: Vec<usize>,
    tau: f64,
    importance: Vec<f64>,
    iteration: usize,
    burn_in: usize,
    k_min: usize,
}

impl EnsembleState {
    /// `k_max` empty components, no active set yet, `v = 1`.
    pub fn new(p: usize, k_max: usize, k_min: usize, burn_in: usize, tau: f64) -> Self {
        Self {
            components: (0..k_max).map(|_| ComponentState::empty(p)).collect(),
            active: Vec::new(),
            tau,
            importance: vec![1.0; p],
            iteration: 0,
            burn_in,
            k_min,
        }
    }

    /// State with the given components, all of them active.
    pub fn with_components(components: Vec<ComponentState>, tau: f64) -> Result<Self> {
        let p = components
            .first()
            .map(|c| c.gamma.len())
            .ok_or_else(|| AgpError::EmptyInput("no components".into()))?;
        if components.iter().any(|c| c.gamma.len() != p) {
            return Err(AgpError::DimensionMismatch(
                "components disagree on p".into(),
            ));
        }
        let k = components.len();
        Ok(Self {
            active: (0..k).collect(),
            components,
            tau,
            importance: vec![1.0; p],
            iteration: 0,
            burn_in: 100,
            k_min: 1.min(k),
        })
    }

    pub fn p(&self) -> usize {
        self.importance.len()
    }
    pub fn k_max(&self) -> usize {
        self.components.len()
    }
    pub fn k_min(&self) -> usize {
        self.k_min
    }
    pub fn components(&self) -> &[ComponentState] {
        &self.components
    }
    pub fn components_mut(&mut self) -> &mut [ComponentState] {
        &mut self.components
    }
    pub fn component(&self, l: usize) -> &ComponentState {
        &self.components[l]
    }
    pub fn set_component(&mut self, l: usize, c: ComponentState) {
        self.components[l] = c;
    }

    /// Active index set `I_A`, sorted.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn set_active(&mut self, mut active: Vec<usize>) -> Result<()> {
        active.sort_unstable();
        active.dedup();
        if active.iter().any(|&l| l >= self.k_max()) {
            return Err(AgpError::InvalidParameter(
                "active index out of range".into(),
            ));
        }
        self.active = active;
        Ok(())
    }

    pub fn is_active(&self, l: usize) -> bool {
        self.active.binary_search(&l).is_ok()
    }

    /// `k_a = #{l : rho_l > 0 or d_l > 0}` over all components.
    pub fn k_active(&self) -> usize {
        self.components.iter().filter(|c| c.is_occupied()).count()
    }

    /// Sets `I_A` to the occupied components.
    pub fn refresh_active_from_content(&mut self) {
        self.active = (0..self.k_max())
            .filter(|&l| self.components[l].is_occupied())
            .collect();
    }

    /// Active components with at least one predictor.
    pub fn nonempty_active(&self) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&l| !self.components[l].gamma.is_empty())
            .collect()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }
    pub fn importance(&self) -> &[f64] {
        &self.importance
    }
    pub fn set_importance(&mut self, v: Vec<f64>) -> Result<()> {
        if v.len() != self.p() || v.iter().any(|&x| !(x >= 1.0 && x.is_finite())) {
            return Err(AgpError::InvalidParameter(
                "importance scores must be p finite values >= 1".into(),
            ));
        }
        self.importance = v;
        Ok(())
    }
    pub fn iteration(&self) -> usize {
        self.iteration
    }
    pub fn set_iteration(&mut self, t: usize) {
        self.iteration = t;
    }
    pub fn burn_in(&self) -> usize {
        self.burn_in
    }
    pub fn set_burn_in(&mut self, b0: usize) {
        self.burn_in = b0;
    }
}

/// Algorithm 2: refreshes `I_A` and returns the neighborhood budget.
///
/// Components in `I_A` that became null (`rho = 0`, `d = 0`) are released
/// first; every remaining member is kept and each other component is switched
/// on with probability `theta_0 = 1 / (k_max - k_a)`. The last `k_min` indices
/// are forced on while `|I_A| < k_min`.
pub fn update_active_set<R: Rng + ?Sized>(
    state: &mut EnsembleState,
    budget: usize,
    rng: &mut R,
) -> Result<BudgetPlan> {
    if budget < 1 {
        return Err(AgpError::InvalidParameter("budget B must be >= 1".into()));
    }
    let k_max = state.k_max();
    let k_min = state.k_min.min(k_max);
    let k_a = state.k_active();
    let theta0 = if k_a >= k_max {
        0.0
    } else {
        1.0 / (k_max - k_a) as f64
    };
    let mut member: Vec<bool> = vec![false; k_max];
    for &l in &state.active {
        member[l] = state.components[l].is_occupied();
    }
    let mut count = member.iter().filter(|&&b| b).count();
    for l in 0..k_max {
        let varrho = if member[l] { 1.0 } else { theta0 };
        let forced = l + 1 > k_max - k_min && count < k_min;
        let keep = forced || rng.random::<f64>() < varrho;
        if keep != member[l] {
            if keep {
                count += 1;
            } else {
                count -= 1;
            }
            member[l] = keep;
        }
    }
    state.active = (0..k_max).filter(|&l| member[l]).collect();
    BudgetPlan::new(budget, state.active.len())
}

/// Step-size factor of the importance update at iteration `t`.
pub fn importance_step(t: usize, burn_in: usize, zeta: f64) -> f64 {
    if t <= burn_in {
        t as f64 / burn_in as f64
    } else {
        1.0 / ((t - burn_in) as f64).powf(zeta)
    }
}

fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.5 && zeta <= 1.0) {
        return Err(AgpError::InvalidParameter(format!(
            "learning-rate exponent {zeta} outside (1/2, 1]"
        )));
    }
    Ok(())
}

/// Importance update contributed by active component `l` (no-op unless
/// `rho_l > 0` and `d_l > 0`, or when `k_a = 0`).
pub fn update_importance_component(state: &mut EnsembleState, l: usize, zeta: f64) -> Result<()> {
    check_zeta(zeta)?;
    let k_a = state.k_active();
    let c = &state.components[l];
    if k_a == 0 || c.cell.is_null() || c.gamma.is_empty() {
        return Ok(());
    }
    let inc = importance_step(state.iteration.max(1), state.burn_in.max(1), zeta)
        / (k_a as f64).powf(zeta);
    for j in c.gamma.indices() {
        state.importance[j] += inc;
    }
    Ok(())
}

/// Full importance update summed over all active components.
pub fn update_importance(state: &mut EnsembleState, zeta: f64) -> Result<()> {
    check_zeta(zeta)?;
    let active = state.active.clone();
    for l in active {
        update_importance_component(state, l, zeta)?;
    }
    Ok(())
}

/// Persisted per-component snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    /// 1-based predictor indices.
    pub gamma: Vec<usize>,
    pub rho: f64,
    pub lambda: f64,
}

/// One line of the chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub components: Vec<ComponentRecord>,
    /// 0-based indices of active components.
    pub active: Vec<usize>,
    pub tau: f64,
    pub sigma2: Option<f64>,
}

impl ChainRecord {
    pub fn from_state(state: &EnsembleState, grid: &GridSpec, sigma2: Option<f64>) -> Self {
        Self {
            iteration: state.iteration(),
            components: state
                .components()
                .iter()
                .map(|c| ComponentRecord {
                    gamma: c.gamma.to_one_based(),
                    rho: c.rho(grid),
                    lambda: c.lambda(grid),
                })
                .collect(),
            active: state.active().to_vec(),
            tau: state.tau(),
            sigma2,
        }
    }

    /// Inclusion vectors of every component (0-based).
    pub fn gammas(&self, p: usize) -> Result<Vec<InclusionVector>> {
        self.components
            .iter()
            .map(|c| InclusionVector::from_one_based(p, &c.gamma))
            .collect()
    }

    /// `(gamma, rho, lambda)` triples for components with `rho > 0`.
    pub fn signal_components(&self, p: usize) -> Result<Vec<(InclusionVector, f64, f64)>> {
        self.components
            .iter()
            .filter(|c| c.rho > 0.0)
            .map(|c| Ok((InclusionVector::from_one_based(p, &c.gamma)?, c.rho, c.lambda)))
            .collect()
    }

    /// Rebuilds component states on `grid`; fails if a scale is off-grid.
    pub fn to_components(&self, p: usize, grid: &GridSpec) -> Result<Vec<ComponentState>> {
        self.components
            .iter()
            .map(|c| {
                let cell = grid.find_cell(c.rho, c.lambda).ok_or_else(|| {
                    AgpError::Data(format!(
                        "scale pair ({}, {}) is not on the grid",
                        c.rho, c.lambda
                    ))
                })?;
                Ok(ComponentState::new(
                    InclusionVector::from_one_based(p, &c.gamma)?,
                    cell,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::default_grids;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toggle_examples() {
        let g = InclusionVector::empty(3);
        let t = toggle(0, &g).unwrap();
        assert_eq!(t.indices(), vec![0]);
        assert_eq!(toggle(0, &t).unwrap(), g);
        assert!(toggle(3, &g).is_err());
        let g = InclusionVector::from_indices(5, &[1, 3]).unwrap();
        let swapped = toggle(4, &toggle(1, &g).unwrap()).unwrap();
        assert_eq!(swapped.size(), g.size());
        assert_eq!(swapped.indices(), vec![3, 4]);
    }

    #[test]
    fn bit_vector_across_word_boundaries() {
        let idx = [0, 63, 64, 127, 128, 999];
        let g = InclusionVector::from_indices(1000, &idx).unwrap();
        assert_eq!(g.size(), 6);
        assert_eq!(g.indices(), idx.to_vec());
        assert_eq!(g.complement().size(), 994);
        assert!(g.contains(999) && !g.contains(998));
        assert_eq!(g.to_one_based()[5], 1000);
        assert_eq!(InclusionVector::from_one_based(1000, &g.to_one_based()).unwrap(), g);
        assert!(InclusionVector::from_one_based(10, &[0]).is_err());
    }

    fn occupied_state(k_max: usize, k_min: usize, occupied: &[usize]) -> EnsembleState {
        let mut s = EnsembleState::new(20, k_max, k_min, 100, 0.05);
        for &l in occupied {
            s.components_mut()[l] =
                ComponentState::new(InclusionVector::from_indices(20, &[l]).unwrap(), GridCell::new(1, 0));
        }
        s.refresh_active_from_content();
        s
    }

    #[test]
    fn full_ensemble_is_frozen() {
        let mut s = occupied_state(4, 1, &[0, 1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let plan = update_active_set(&mut s, 40, &mut rng).unwrap();
            assert_eq!(s.active(), &[0, 1, 2, 3]);
            assert_eq!(plan.per_component, 10);
        }
    }

    #[test]
    fn one_slack_component_switches_on_surely() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut s = occupied_state(4, 1, &[0, 1, 2]);
            update_active_set(&mut s, 40, &mut rng).unwrap();
            assert_eq!(s.active().len(), 4);
        }
    }

    #[test]
    fn expected_one_component_switched_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = 20_000;
        let mut added = 0usize;
        for _ in 0..reps {
            let mut s = occupied_state(10, 1, &[0, 4]);
            update_active_set(&mut s, 100, &mut rng).unwrap();
            added += s.active().len() - 2;
        }
        let mean = added as f64 / reps as f64;
        // Binomial(8, 1/8): mean 1, sd sqrt(7/8)
        assert!((mean - 1.0).abs() < 4.0 * (0.875f64 / reps as f64).sqrt(), "{mean}");
    }

    #[test]
    fn null_members_are_released_and_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = occupied_state(8, 3, &[]);
        for it in 0..500 {
            update_active_set(&mut s, 80, &mut rng).unwrap();
            let a = s.active().len();
            assert!((3..=8).contains(&a), "iteration {it}: |I_A| = {a}");
        }
        let plan = BudgetPlan::new(320, 10).unwrap();
        assert_eq!(plan.per_component, 32);
        assert!(update_active_set(&mut s, 0, &mut rng).is_err());
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_step(100, 100, 2.0 / 3.0), 1.0);
        assert_eq!(importance_step(101, 100, 2.0 / 3.0), 1.0);
        assert!(importance_step(100 + 1_000_000, 100, 2.0 / 3.0) < 1e-3);
        let mut s = occupied_state(4, 1, &[0]);
        s.set_iteration(100);
        update_importance(&mut s, 2.0 / 3.0).unwrap();
        assert_eq!(s.importance()[0], 2.0);
        assert!(s.importance()[1..].iter().all(|&v| v == 1.0));
        // rho = 0 components never contribute
        s.components_mut()[0].cell = GridCell::new(0, 0);
        update_importance(&mut s, 2.0 / 3.0).unwrap();
        assert_eq!(s.importance()[0], 2.0);
        assert!(update_importance(&mut s, 0.5).is_err());
    }

    #[test]
    fn importance_is_nondecreasing() {
        let mut s = occupied_state(6, 1, &[0, 2, 5]);
        s.set_burn_in(10);
        let mut prev = s.importance().to_vec();
        for t in 1..200 {
            s.set_iteration(t);
            update_importance(&mut s, 2.0 / 3.0).unwrap();
            assert!(s.importance().iter().zip(&prev).all(|(a, b)| a >= b));
            prev = s.importance().to_vec();
        }
    }

    #[test]
    fn state_serialization_round_trips() {
        let mut s = occupied_state(5, 2, &[1, 3]);
        s.set_tau(0.123_456_789_012_345_67);
        s.set_importance((0..20).map(|j| 1.0 + j as f64 / 3.0).collect()).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: EnsembleState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.tau().to_bits(), s.tau().to_bits());
    }

    #[test]
    fn chain_record_round_trip() {
        let grid = default_grids();
        let s = occupied_state(3, 1, &[0, 2]);
        let rec = ChainRecord::from_state(&s, &grid, Some(0.9));
        assert_eq!(rec.components[2].gamma, vec![3]);
        let comps = rec.to_components(20, &grid).unwrap();
        assert_eq!(comps, s.components());
        let text = serde_json::to_string(&rec).unwrap();
        let back: ChainRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
    }

    proptest::proptest! {
        #[test]
        fn toggle_is_an_involution(bits in proptest::collection::vec(proptest::bool::ANY, 1..200), j in 0usize..200) {
            let g = InclusionVector::from_bools(&bits);
            let j = j % bits.len();
            let t = toggle(j, &g).unwrap();
            proptest::prop_assert_eq!(t.size() as i64 - g.size() as i64, if g.contains(j) { -1 } else { 1 });
            proptest::prop_assert_eq!(toggle(j, &t).unwrap(), g.clone());
            proptest::prop_assert_eq!(g.size(), bits.iter().filter(|b| **b).count());
        }

        #[test]
        fn active_set_bounds(seed in 0u64..1000, k_max in 2usize..12, occupancy in proptest::collection::vec(proptest::bool::ANY, 12)) {
            let k_min = 1 + (seed as usize % k_max);
            let occ: Vec<usize> = (0..k_max).filter(|&l| occupancy[l]).collect();
            let mut s = occupied_state(k_max, k_min, &occ);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                update_active_set(&mut s, 10, &mut rng).unwrap();
                proptest::prop_assert!(s.active().len() >= k_min && s.active().len() <= k_max);
            }
        }
    }
}
