//! Simulated test functions and the replicate experiment harness.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, XScaling};
use crate::error::{AgpError, Result};
use crate::inference::{interaction_graph, predict, PosteriorSummary};
use crate::linalg::MarginalScale;
use crate::model::ModelTarget;
use crate::priors::GridSpec;
use crate::sampler::{retained, run_chain, ChainOutput, SamplerConfig};

/// Regression functions of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    Friedman,
    Confounded,
    Linear,
    Single,
}

impl TestFunction {
    pub const ALL: [TestFunction; 4] = [
        TestFunction::Friedman,
        TestFunction::Confounded,
        TestFunction::Linear,
        TestFunction::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Friedman => "friedman",
            TestFunction::Confounded => "confounded",
            TestFunction::Linear => "linear",
            TestFunction::Single => "single",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name.to_ascii_lowercase())
            .ok_or_else(|| {
                AgpError::InvalidParameter(format!(
                    "unknown test function '{name}' (expected one of: friedman, confounded, linear, single)"
                ))
            })
    }

    /// 1-based indices of the predictors the function depends on.
    pub fn support(self) -> Vec<usize> {
        match self {
            TestFunction::Friedman => (1..=7).collect(),
            TestFunction::Confounded => (1..=5).collect(),
            TestFunction::Linear => (1..=10).collect(),
            TestFunction::Single => vec![1, 2],
        }
    }

    pub fn min_p(self) -> usize {
        *self.support().iter().max().expect("nonempty support")
    }

    /// Evaluates `f(x)`; `x` must have at least [`Self::min_p`] entries.
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Friedman => {
                10.0 * (PI * x[0] * x[1]).sin()
                    + 10.0 * (PI * (x[2] * x[3] + x[4])).cos()
                    + 20.0 * (x[5] - 0.5).powi(2)
                    + 10.0 * x[6]
            }
            TestFunction::Confounded => {
                10.0 * (PI * (x[0] + x[1] + x[2])).cos()
                    + 10.0 * (PI * (x[1] + x[3])).sin()
                    + 10.0 * x[4] * (x[0] + x[1])
            }
            TestFunction::Linear => {
                5.0 * x[..5].iter().sum::<f64>() + 2.0 * x[5..10].iter().sum::<f64>()
            }
            TestFunction::Single => 10.0 * (PI * (x[0] + 5.0 * x[1])).cos(),
        }
    }
}

/// A simulated training/test split with the noiseless truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub function: TestFunction,
    pub train: Dataset,
    pub test: Dataset,
    pub f_train: Vec<f64>,
    pub f_test: Vec<f64>,
}

/// Mixes a base seed with an index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(
    function: TestFunction,
    n: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let f: Vec<f64> = (0..n)
        .map(|i| function.eval(&x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let y = DVector::from_fn(n, |i, _| f[i] + rng.sample::<f64, _>(StandardNormal));
    (x, y, f)
}

/// `x_ij ~ Unif(0, 1)`, `y_i ~ N(f(x_i), 1)` for `n` training and `n_test`
/// test points; the test set is standardized with training statistics.
pub fn generate_with_test(
    function: TestFunction,
    n: usize,
    p: usize,
    n_test: usize,
    seed: u64,
    scaling: XScaling,
) -> Result<SimulatedData> {
    if p < function.min_p() {
        return Err(AgpError::InvalidParameter(format!(
            "{} needs p >= {}, got {p}",
            function.name(),
            function.min_p()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y, f_train) = draw(function, n, p, &mut rng);
    let (xt, yt, f_test) = draw(function, n_test, p, &mut rng);
    let train = Dataset::new(x, y, scaling)?;
    let test = Dataset::with_stats(train.names.clone(), xt, yt, train.stats.clone())?;
    Ok(SimulatedData {
        function,
        train,
        test,
        f_train,
        f_test,
    })
}

/// [`generate_with_test`] with 200 test points and unit-range predictors.
pub fn generate(function: TestFunction, n: usize, p: usize, seed: u64) -> Result<SimulatedData> {
    generate_with_test(function, n, p, 200, seed, XScaling::UnitRange)
}

/// Root-mean-squared difference.
pub fn rmse(pred: &[f64], observed: &[f64]) -> Result<f64> {
    if pred.len() != observed.len() {
        return Err(AgpError::DimensionMismatch(format!(
            "{} predictions for {} observations",
            pred.len(),
            observed.len()
        )));
    }
    if pred.is_empty() {
        return Err(AgpError::EmptyInput("no values to compare".into()));
    }
    let ss: f64 = pred.iter().zip(observed).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Settings of a replicated simulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub function: TestFunction,
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    pub n_test: usize,
    pub seed: u64,
    pub scaling: XScaling,
    pub sampler: SamplerConfig,
    pub grid: GridSpec,
    pub scale: MarginalScale,
    /// Interaction-graph size parameter.
    pub q: usize,
    /// Inclusion threshold for support recovery.
    pub threshold: f64,
    /// Also run every replicate with inter-component moves disabled.
    pub icm_ablation: bool,
}

impl ExperimentSpec {
    pub fn new(function: TestFunction, n: usize, p: usize) -> Self {
        Self {
            function,
            n,
            p,
            replicates: 10,
            n_test: 200,
            seed: 1,
            scaling: XScaling::UnitRange,
            sampler: SamplerConfig::default(),
            grid: crate::priors::default_grids(),
            scale: MarginalScale::default(),
            q: 10,
            threshold: 0.5,
            icm_ablation: false,
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    pub icm: bool,
    /// RMSE against the noisy test responses.
    pub rmse: f64,
    /// RMSE against the noiseless test function.
    pub rmse_truth: f64,
    /// RMSE of the training-mean predictor.
    pub null_rmse: f64,
    /// Fraction of test points whose 95% band covers the true function.
    pub coverage: f64,
    pub sigma2_mean: f64,
    pub marginal_inclusion: Vec<f64>,
    /// 1-based predictors above the threshold.
    pub selected: Vec<usize>,
    pub recall: f64,
    pub false_positives: usize,
    pub active_count_hist: Vec<usize>,
    pub nonempty_count_hist: Vec<usize>,
    /// `(j, k, weight)` with 1-based predictors.
    pub edges: Vec<(usize, usize, f64)>,
    pub dmtm_acceptance: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Replicates plus aggregate RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub replicates: Vec<ReplicateReport>,
    pub ablation: Vec<ReplicateReport>,
}

/// Mean and standard error over the finite entries.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl ExperimentReport {
    pub fn rmse_summary(&self) -> (f64, f64) {
        mean_se(&self.replicates.iter().map(|r| r.rmse).collect::<Vec<_>>())
    }

    pub fn ablation_rmse_summary(&self) -> Option<(f64, f64)> {
        if self.ablation.is_empty() {
            None
        } else {
            Some(mean_se(&self.ablation.iter().map(|r| r.rmse).collect::<Vec<_>>()))
        }
    }
}

fn failed(replicate: usize, seed: u64, icm: bool, p: usize, err: &AgpError) -> ReplicateReport {
    ReplicateReport {
        replicate,
        seed,
        icm,
        rmse: f64::NAN,
        rmse_truth: f64::NAN,
        null_rmse: f64::NAN,
        coverage: f64::NAN,
        sigma2_mean: f64::NAN,
        marginal_inclusion: vec![0.0; p],
        selected: Vec::new(),
        recall: 0.0,
        false_positives: 0,
        active_count_hist: Vec::new(),
        nonempty_count_hist: Vec::new(),
        edges: Vec::new(),
        dmtm_acceptance: f64::NAN,
        seconds: 0.0,
        error: Some(err.to_string()),
    }
}

/// Data and chain behind one replicate's report.
#[derive(Debug, Clone)]
pub struct ReplicateFit {
    pub data: SimulatedData,
    pub config: SamplerConfig,
    pub chain: ChainOutput,
}

/// Runs one replicate: simulate, sample, predict and summarize.
pub fn run_replicate(spec: &ExperimentSpec, replicate: usize, icm: bool) -> ReplicateReport {
    let seed = derive_seed(spec.seed, replicate as u64);
    match run_replicate_detailed(spec, replicate, icm) {
        Ok((r, _)) => r,
        Err(e) => failed(replicate, seed, icm, spec.p, &e),
    }
}

/// [`run_replicate`] that also hands back the simulated data and the chain,
/// and propagates failures instead of recording them.
pub fn run_replicate_detailed(
    spec: &ExperimentSpec,
    replicate: usize,
    icm: bool,
) -> Result<(ReplicateReport, ReplicateFit)> {
    let seed = derive_seed(spec.seed, replicate as u64);
    let start = Instant::now();
    let sim = generate_with_test(spec.function, spec.n, spec.p, spec.n_test, seed, spec.scaling)?;
    let target = ModelTarget::new(
        sim.train.x_std.clone(),
        sim.train.y_std.clone(),
        spec.grid.clone(),
        spec.scale,
    )?;
    let mut config = spec.sampler.clone();
    config.seed = derive_seed(seed, 1);
    if !icm {
        config.icm_prob = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chain = run_chain(&target, &config, &mut rng)?;
    let kept = retained(&chain.records, config.burn_in, config.thin);
    let kept = if kept.is_empty() {
        chain.records.iter().collect()
    } else {
        kept
    };
    let pred = predict(&target, &kept, &sim.test.x_std, &sim.train.stats, &mut rng)?;
    let y_test: Vec<f64> = sim.test.y_raw.iter().copied().collect();
    let null = vec![sim.train.stats.y_center; y_test.len()];
    let summary = PosteriorSummary::from_records(&kept, spec.p)?;
    let support = spec.function.support();
    let selected: Vec<usize> = (1..=spec.p)
        .filter(|&j| summary.marginal_inclusion[j - 1] > spec.threshold)
        .collect();
    let hits = selected.iter().filter(|j| support.contains(j)).count();
    let graph = interaction_graph(&kept, spec.p, spec.q.min(spec.p), false)?;
    let covered = sim
        .f_test
        .iter()
        .enumerate()
        .filter(|(i, f)| pred.lower[*i] <= **f && **f <= pred.upper[*i])
        .count();
    let stats = &chain.stats;
    let report = ReplicateReport {
        replicate,
        seed,
        icm,
        rmse: rmse(&pred.mean, &y_test)?,
        rmse_truth: rmse(&pred.mean, &sim.f_test)?,
        null_rmse: rmse(&null, &y_test)?,
        coverage: covered as f64 / sim.f_test.len() as f64,
        // sigma^2 lives on the standardized scale; report it on the data scale
        sigma2_mean: summary.sigma2_mean().unwrap_or(f64::NAN) * sim.train.stats.y_scale.powi(2),
        marginal_inclusion: summary.marginal_inclusion.clone(),
        recall: hits as f64 / support.len() as f64,
        false_positives: selected.len() - hits,
        selected,
        active_count_hist: summary.active_count_hist,
        nonempty_count_hist: summary.nonempty_count_hist,
        edges: graph.edges.iter().map(|&(j, k, w)| (j + 1, k + 1, w)).collect(),
        dmtm_acceptance: stats.dmtm_accepted as f64 / stats.dmtm_proposed.max(1) as f64,
        seconds: start.elapsed().as_secs_f64(),
        error: None,
    };
    Ok((
        report,
        ReplicateFit {
            data: sim,
            config,
            chain,
        },
    ))
}

/// Runs all replicates in parallel on the current rayon pool. Failed
/// replicates are recorded with their error and the run continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let results = run_experiment_detailed(spec)?;
    let (replicates, ablation) = results.into_iter().map(|(r, _)| r).partition(|r| r.icm);
    Ok(ExperimentReport {
        spec: spec.clone(),
        replicates,
        ablation,
    })
}

/// [`run_experiment`] keeping each replicate's data and chain, in job order:
/// replicates with inter-component moves first, then the ablation runs.
/// Failed replicates carry their error and no fit.
pub fn run_experiment_detailed(
    spec: &ExperimentSpec,
) -> Result<Vec<(ReplicateReport, Option<ReplicateFit>)>> {
    if spec.replicates == 0 {
        return Err(AgpError::InvalidParameter("need at least one replicate".into()));
    }
    if spec.p < spec.function.min_p() {
        return Err(AgpError::InvalidParameter(format!(
            "{} needs p >= {}",
            spec.function.name(),
            spec.function.min_p()
        )));
    }
    spec.sampler.validate()?;
    let mut jobs: Vec<(usize, bool)> = (0..spec.replicates).map(|r| (r, true)).collect();
    if spec.icm_ablation {
        jobs.extend((0..spec.replicates).map(|r| (r, false)));
    }
    Ok(jobs
        .par_iter()
        .map(|&(r, icm)| match run_replicate_detailed(spec, r, icm) {
            Ok((report, fit)) => (report, Some(fit)),
            Err(e) => (failed(r, derive_seed(spec.seed, r as u64), icm, spec.p, &e), None),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn function_values() {
        let half = vec![0.5; 10];
        let expected = 10.0 * (PI / 4.0).sin() + 10.0 * (0.75 * PI).cos() + 5.0;
        assert_abs_diff_eq!(TestFunction::Friedman.eval(&half), expected, epsilon = 1e-12);
        assert_eq!(TestFunction::Single.eval(&[0.0, 0.0]), 10.0);
        assert_eq!(TestFunction::Linear.eval(&[0.0; 10]), 0.0);
        assert_abs_diff_eq!(TestFunction::Linear.eval(&[1.0; 10]), 35.0);
    }

    #[test]
    fn functions_ignore_other_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in TestFunction::ALL {
            let mut x: Vec<f64> = (0..20).map(|_| rng.random()).collect();
            let base = f.eval(&x);
            for v in x.iter_mut().skip(f.min_p()) {
                *v = rng.random();
            }
            assert_eq!(f.eval(&x), base);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(TestFunction::parse("Friedman").unwrap(), TestFunction::Friedman);
        let err = TestFunction::parse("rosenbrock").unwrap_err().to_string();
        assert!(err.contains("friedman") && err.contains("single"));
    }

    #[test]
    fn generation_is_seeded_and_sized() {
        let a = generate(TestFunction::Single, 30, 5, 7).unwrap();
        let b = generate(TestFunction::Single, 30, 5, 7).unwrap();
        assert_eq!(a.train.x_raw, b.train.x_raw);
        assert_eq!(a.test.y_raw, b.test.y_raw);
        assert_eq!(a.test.n(), 200);
        assert!(generate(TestFunction::Linear, 30, 9, 1).is_err());
    }

    #[test]
    fn noise_has_unit_variance() {
        let sim = generate_with_test(TestFunction::Friedman, 10_000, 7, 1, 3, XScaling::None).unwrap();
        let resid: Vec<f64> = sim.train.y_raw.iter().zip(&sim.f_train).map(|(y, f)| y - f).collect();
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let v = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((0.8..=1.2).contains(&v), "{v}");
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }
}
