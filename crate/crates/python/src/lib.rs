//! Python bindings: fitting, prediction, simulation studies and oracle checks.
//!
//! Matrices cross the boundary as sequences of rows (lists or 2-D numpy
//! arrays); indices of predictors are 1-based, as in the chain files.

use agp_core::inference::{interaction_graph, predict, PosteriorSummary};
use agp_core::linalg::{log_ml_dense_sigma, se_covariance, MarginalScale};
use agp_core::oracle::{check_dmtm_balance, check_icm_balance, check_stationarity, sample_chain};
use agp_core::priors::{
    component_bounds, lambda_for_correlation, rho_for_r2, DEFAULT_CORRELATION_TARGETS,
    DEFAULT_R2_TARGETS,
};
use agp_core::sampler::retained;
use agp_core::simbench::{derive_seed, run_experiment, ExperimentSpec, ReplicateReport, TestFunction};
use agp_core::model::Target;
use agp_core::{
    run_chain, AgpError, ChainRecord, Dataset, DmtmParams, ExactPosterior, GridSpec, IcmParams,
    InclusionVector, ModelTarget, MoveKind, Mutation, SamplerConfig, Standardization, XScaling,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: AgpError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Prior, grid and sampler settings.
#[pyclass(name = "SamplerConfig", from_py_object)]
#[derive(Debug, Clone)]
struct PyConfig {
    #[pyo3(get, set)]
    iterations: usize,
    #[pyo3(get, set)]
    burn_in: usize,
    #[pyo3(get, set)]
    thin: usize,
    #[pyo3(get, set)]
    seed: u64,
    #[pyo3(get, set)]
    icm_prob: f64,
    #[pyo3(get, set)]
    alpha_incl: f64,
    #[pyo3(get, set)]
    zeta: f64,
    #[pyo3(get, set)]
    d_star: f64,
    #[pyo3(get, set)]
    adapt_importance: bool,
    #[pyo3(get, set)]
    budget: Option<usize>,
    #[pyo3(get, set)]
    k_min: Option<usize>,
    #[pyo3(get, set)]
    k_max: Option<usize>,
    #[pyo3(get, set)]
    x_scaling: String,
    #[pyo3(get, set)]
    rho_r2: Vec<f64>,
    #[pyo3(get, set)]
    lambda_corr: Vec<f64>,
    #[pyo3(get, set)]
    a: f64,
    #[pyo3(get, set)]
    b: f64,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        iterations = 1000, burn_in = 200, thin = 4, seed = 1, icm_prob = 0.2,
        alpha_incl = 1.5, zeta = 2.0 / 3.0, d_star = 1.0, adapt_importance = true,
        budget = None, k_min = None, k_max = None, x_scaling = "unit-range".to_string(),
        rho_r2 = DEFAULT_R2_TARGETS.to_vec(), lambda_corr = DEFAULT_CORRELATION_TARGETS.to_vec(),
        a = 1.0, b = 1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        iterations: usize,
        burn_in: usize,
        thin: usize,
        seed: u64,
        icm_prob: f64,
        alpha_incl: f64,
        zeta: f64,
        d_star: f64,
        adapt_importance: bool,
        budget: Option<usize>,
        k_min: Option<usize>,
        k_max: Option<usize>,
        x_scaling: String,
        rho_r2: Vec<f64>,
        lambda_corr: Vec<f64>,
        a: f64,
        b: f64,
    ) -> Self {
        Self {
            iterations,
            burn_in,
            thin,
            seed,
            icm_prob,
            alpha_incl,
            zeta,
            d_star,
            adapt_importance,
            budget,
            k_min,
            k_max,
            x_scaling,
            rho_r2,
            lambda_corr,
            a,
            b,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "SamplerConfig(iterations={}, burn_in={}, thin={}, seed={}, icm_prob={}, x_scaling='{}')",
            self.iterations, self.burn_in, self.thin, self.seed, self.icm_prob, self.x_scaling
        )
    }
}

impl PyConfig {
    fn sampler(&self, p: usize) -> Result<SamplerConfig, AgpError> {
        let k_bounds = if self.k_min.is_some() || self.k_max.is_some() {
            let (lo, hi) = component_bounds(p)?;
            Some((self.k_min.unwrap_or(lo), self.k_max.unwrap_or(hi)))
        } else {
            None
        };
        let c = SamplerConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            alpha_incl: self.alpha_incl,
            icm_prob: self.icm_prob,
            zeta: self.zeta,
            adapt_importance: self.adapt_importance,
            budget: self.budget,
            d_star: self.d_star,
            k_bounds,
            seed: self.seed,
            ..SamplerConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    fn grid(&self) -> Result<GridSpec, AgpError> {
        GridSpec::from_targets(&self.rho_r2, &self.lambda_corr, 0.0, 0.0)
    }

    fn scale(&self) -> Result<MarginalScale, AgpError> {
        MarginalScale::new(self.a, self.b)
    }

    fn scaling(&self) -> Result<XScaling, AgpError> {
        XScaling::parse(&self.x_scaling)
    }
}

/// A fitted model: the chain plus what is needed to predict.
#[pyclass]
struct Fit {
    target: ModelTarget,
    stats: Standardization,
    records: Vec<ChainRecord>,
    config: SamplerConfig,
    dmtm_acceptance: f64,
}

impl Fit {
    fn kept(&self) -> Vec<&ChainRecord> {
        let kept = retained(&self.records, self.config.burn_in, self.config.thin);
        if kept.is_empty() {
            self.records.iter().collect()
        } else {
            kept
        }
    }
}

#[pymethods]
impl Fit {
    /// Posterior inclusion probability of each predictor.
    #[getter]
    fn marginal_inclusion(&self) -> PyResult<Vec<f64>> {
        let p = self.target.p();
        Ok(PosteriorSummary::from_records(&self.kept(), p).map_err(err)?.marginal_inclusion)
    }

    /// Noise-variance draws of the retained records, on the response scale.
    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        let v = self.stats.y_scale.powi(2);
        self.kept().iter().filter_map(|r| r.sigma2).map(|s| s * v).collect()
    }

    #[getter]
    fn dmtm_acceptance(&self) -> f64 {
        self.dmtm_acceptance
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Interaction-graph edges `(j, k, weight)` among the `q` most included predictors.
    #[pyo3(signature = (q = 10))]
    fn edges(&self, q: usize) -> PyResult<Vec<(usize, usize, f64)>> {
        let p = self.target.p();
        let g = interaction_graph(&self.kept(), p, q.min(p), false).map_err(err)?;
        Ok(g.edges.iter().map(|&(j, k, w)| (j + 1, k + 1, w)).collect())
    }

    /// Predictive mean and 95% band at new raw inputs.
    #[pyo3(signature = (x, seed = None))]
    fn predict(
        &self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        seed: Option<u64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let x = self.stats.standardize_x(&matrix(&x)?).map_err(err)?;
        let seed = seed.unwrap_or_else(|| derive_seed(self.config.seed, 2));
        let out = py.detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            predict(&self.target, &self.kept(), &x, &self.stats, &mut rng)
        });
        let p = out.map_err(err)?;
        Ok((p.mean, p.lower, p.upper))
    }

    /// The chain as JSON lines, one record per iteration.
    fn chain_json(&self) -> PyResult<Vec<String>> {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string())))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(n={}, p={}, records={})",
            self.target.n(),
            self.target.p(),
            self.records.len()
        )
    }
}

/// Samples the posterior of an additive-interactive GP for `y` given rows `x`.
#[pyfunction]
#[pyo3(signature = (x, y, config = None))]
fn fit(py: Python<'_>, x: Vec<Vec<f64>>, y: Vec<f64>, config: Option<PyConfig>) -> PyResult<Fit> {
    let cfg = config.unwrap_or_else(|| PyConfig::new(
        1000, 200, 4, 1, 0.2, 1.5, 2.0 / 3.0, 1.0, true, None, None, None,
        "unit-range".into(), DEFAULT_R2_TARGETS.to_vec(), DEFAULT_CORRELATION_TARGETS.to_vec(),
        1.0, 1.0,
    ));
    let x = matrix(&x)?;
    let data = Dataset::new(x, DVector::from_vec(y), cfg.scaling().map_err(err)?).map_err(err)?;
    let config = cfg.sampler(data.p()).map_err(err)?;
    let target = ModelTarget::new(
        data.x_std.clone(),
        data.y_std.clone(),
        cfg.grid().map_err(err)?,
        cfg.scale().map_err(err)?,
    )
    .map_err(err)?;
    let chain = py
        .detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            run_chain(&target, &config, &mut rng)
        })
        .map_err(err)?;
    let s = &chain.stats;
    Ok(Fit {
        target,
        stats: data.stats,
        dmtm_acceptance: s.dmtm_accepted as f64 / s.dmtm_proposed.max(1) as f64,
        records: chain.records,
        config,
    })
}

/// One replicate of a simulation study.
#[pyclass(get_all)]
struct Replicate {
    replicate: usize,
    icm: bool,
    rmse: f64,
    rmse_truth: f64,
    null_rmse: f64,
    coverage: f64,
    sigma2: f64,
    marginal_inclusion: Vec<f64>,
    selected: Vec<usize>,
    recall: f64,
    false_positives: usize,
    edges: Vec<(usize, usize, f64)>,
    dmtm_acceptance: f64,
    error: Option<String>,
}

impl From<ReplicateReport> for Replicate {
    fn from(r: ReplicateReport) -> Self {
        Self {
            replicate: r.replicate,
            icm: r.icm,
            rmse: r.rmse,
            rmse_truth: r.rmse_truth,
            null_rmse: r.null_rmse,
            coverage: r.coverage,
            sigma2: r.sigma2_mean,
            marginal_inclusion: r.marginal_inclusion,
            selected: r.selected,
            recall: r.recall,
            false_positives: r.false_positives,
            edges: r.edges,
            dmtm_acceptance: r.dmtm_acceptance,
            error: r.error,
        }
    }
}

#[pymethods]
impl Replicate {
    fn __repr__(&self) -> String {
        format!(
            "Replicate({}, icm={}, rmse={:.3}, selected={:?})",
            self.replicate, self.icm, self.rmse, self.selected
        )
    }
}

/// Runs a replicated study on `friedman`, `confounded`, `linear` or `single`.
#[pyfunction]
#[pyo3(signature = (function, n = 100, p = 50, replicates = 1, n_test = 200, config = None, icm_ablation = false))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    function: &str,
    n: usize,
    p: usize,
    replicates: usize,
    n_test: usize,
    config: Option<PyConfig>,
    icm_ablation: bool,
) -> PyResult<Vec<Replicate>> {
    let f = TestFunction::parse(function).map_err(err)?;
    let mut spec = ExperimentSpec::new(f, n, p);
    spec.replicates = replicates;
    spec.n_test = n_test;
    spec.icm_ablation = icm_ablation;
    if let Some(cfg) = config {
        spec.sampler = cfg.sampler(p).map_err(err)?;
        spec.seed = cfg.seed;
        spec.grid = cfg.grid().map_err(err)?;
        spec.scale = cfg.scale().map_err(err)?;
        spec.scaling = cfg.scaling().map_err(err)?;
    }
    let report = py.detach(|| run_experiment(&spec)).map_err(err)?;
    Ok(report
        .replicates
        .into_iter()
        .chain(report.ablation)
        .map(Replicate::from)
        .collect())
}

/// Outcome of a detailed-balance check.
#[pyclass(get_all)]
struct BalanceResult {
    kind: String,
    pairs: usize,
    max_abs_z: f64,
    flagged: usize,
    bonferroni_z: f64,
    passes: bool,
}

#[pymethods]
impl BalanceResult {
    fn __repr__(&self) -> String {
        format!(
            "BalanceResult('{}', passes={}, max_abs_z={:.2}, pairs={})",
            self.kind, self.passes, self.max_abs_z, self.pairs
        )
    }
}

fn oracle_setup(
    x: &[Vec<f64>],
    y: Vec<f64>,
    rho_r2: Option<Vec<f64>>,
    lambda_corr: Option<Vec<f64>>,
) -> PyResult<ModelTarget> {
    let data = Dataset::new(matrix(x)?, DVector::from_vec(y), XScaling::UnitRange).map_err(err)?;
    let grid = GridSpec::from_targets(
        &rho_r2.unwrap_or_else(|| DEFAULT_R2_TARGETS.to_vec()),
        &lambda_corr.unwrap_or_else(|| DEFAULT_CORRELATION_TARGETS.to_vec()),
        0.0,
        0.0,
    )
    .map_err(err)?;
    ModelTarget::new(data.x_std, data.y_std, grid, MarginalScale::default()).map_err(err)
}

/// Total-variation distance between a sampled chain and the enumerated
/// posterior of a `k`-component model at `tau = 1/p` (p at most 8).
#[pyfunction]
#[pyo3(signature = (x, y, k = 1, steps = 200_000, icm_prob = 0.5, seed = 1, mutation = "none", rho_r2 = None, lambda_corr = None))]
#[allow(clippy::too_many_arguments)]
fn oracle_stationarity(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    k: usize,
    steps: usize,
    icm_prob: f64,
    seed: u64,
    mutation: &str,
    rho_r2: Option<Vec<f64>>,
    lambda_corr: Option<Vec<f64>>,
) -> PyResult<f64> {
    let target = oracle_setup(&x, y, rho_r2, lambda_corr)?;
    let p = target.p();
    let mut dmtm = DmtmParams::new(p, 1.5);
    dmtm.mutation = Mutation::parse(mutation).map_err(err)?;
    let icm_prob = if k == 1 { 0.0 } else { icm_prob };
    py.detach(|| {
        let exact = ExactPosterior::enumerate(&target, k, 1.0 / p as f64)?;
        let chain = sample_chain(
            &exact.table(),
            &exact,
            exact.state(0),
            steps,
            &dmtm,
            &IcmParams::default(),
            icm_prob,
            seed,
        )?;
        check_stationarity(&chain[1_000.min(chain.len())..], &exact)
    })
    .map_err(err)
}

/// Detailed-balance flux check of one move kind (`add`, `remove`, `swap`,
/// `cross-donate`, `paired-donate`, `paired-swap`).
#[pyfunction]
#[pyo3(signature = (x, y, kind, trials = 10_000, seed = 1, mutation = "none", rho_r2 = None, lambda_corr = None))]
#[allow(clippy::too_many_arguments)]
fn oracle_balance(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    kind: &str,
    trials: usize,
    seed: u64,
    mutation: &str,
    rho_r2: Option<Vec<f64>>,
    lambda_corr: Option<Vec<f64>>,
) -> PyResult<BalanceResult> {
    let kind = [
        MoveKind::Add,
        MoveKind::Remove,
        MoveKind::Swap,
        MoveKind::CrossDonate,
        MoveKind::PairedDonate,
        MoveKind::PairedSwap,
    ]
    .into_iter()
    .find(|k| k.label() == kind)
    .ok_or_else(|| PyValueError::new_err(format!("unknown move kind '{kind}'")))?;
    let target = oracle_setup(&x, y, rho_r2, lambda_corr)?;
    let p = target.p();
    let mut dmtm = DmtmParams::new(p, 1.5);
    dmtm.mutation = Mutation::parse(mutation).map_err(err)?;
    let r = py
        .detach(|| {
            let k = if kind.is_inter_component() { 2 } else { 1 };
            let exact = ExactPosterior::enumerate(&target, k, 1.0 / p as f64)?;
            if k == 2 {
                check_icm_balance(&exact.table(), &exact, kind, &IcmParams::default(), trials, seed)
            } else {
                check_dmtm_balance(&exact.table(), &exact, kind, &dmtm, trials, seed)
            }
        })
        .map_err(err)?;
    Ok(BalanceResult {
        kind: r.kind.label().to_string(),
        pairs: r.rows.len(),
        max_abs_z: r.max_abs_z,
        flagged: r.flagged,
        bonferroni_z: r.bonferroni_z,
        passes: r.passes(),
    })
}

/// Log marginal likelihood of `y` under components `(indices, rho, lambda)`
/// on already standardized inputs.
#[pyfunction]
#[pyo3(signature = (x, y, components, a = 1.0, b = 1.0))]
fn log_marginal_likelihood(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    components: Vec<(Vec<usize>, f64, f64)>,
    a: f64,
    b: f64,
) -> PyResult<f64> {
    let x = matrix(&x)?;
    let n = x.nrows();
    let mut sigma = DMatrix::identity(n, n);
    for (idx, rho, lambda) in components {
        let gamma = InclusionVector::from_one_based(x.ncols(), &idx).map_err(err)?;
        sigma += se_covariance(&x, &gamma, lambda).map_err(err)?.values() * (rho * rho);
    }
    let scale = MarginalScale::new(a, b).map_err(err)?;
    log_ml_dense_sigma(sigma, &DVector::from_vec(y), &scale).map_err(err)
}

/// Default `(rho, lambda)` grid values.
#[pyfunction]
fn default_grid() -> (Vec<f64>, Vec<f64>) {
    let g = agp_core::default_grids();
    (g.rho_values().to_vec(), g.lambda_values().to_vec())
}

#[pyfunction(name = "rho_for_r2")]
fn py_rho_for_r2(r2: f64) -> PyResult<f64> {
    rho_for_r2(r2).map_err(err)
}

#[pyfunction(name = "lambda_for_correlation")]
fn py_lambda_for_correlation(c: f64) -> PyResult<f64> {
    lambda_for_correlation(c).map_err(err)
}

#[pymodule]
fn agp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<Fit>()?;
    m.add_class::<Replicate>()?;
    m.add_class::<BalanceResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_stationarity, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_balance, m)?)?;
    m.add_function(wrap_pyfunction!(log_marginal_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(default_grid, m)?)?;
    m.add_function(wrap_pyfunction!(py_rho_for_r2, m)?)?;
    m.add_function(wrap_pyfunction!(py_lambda_for_correlation, m)?)?;
    Ok(())
}
