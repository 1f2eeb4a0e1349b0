//! Acceptance suite.
//!
//! Runs every gating criterion and prints one `PASS`/`FAIL` line each; the
//! process exits non-zero if any gate fails. `AGP_ACCEPTANCE=1,3,4` restricts
//! the run to the listed criteria. The p = 1000 study (criterion 8) is not a
//! gate; see `scripts/table2_p1000.sh`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use agp_core::linalg::{
    log_marginal_likelihood, pivoted_lowrank, se_covariance, KernelMatrix, KernelRef,
    MarginalScale,
};
use agp_core::oracle::{
    check_dmtm_balance, check_icm_balance, check_stationarity, sample_chain, BalanceReport,
    ExactPosterior, MIN_TRIALS,
};
use agp_core::simbench::{mean_se, run_experiment, ExperimentReport, ExperimentSpec, TestFunction};
use agp_core::{
    default_grids, Dataset, DmtmParams, GridSpec, IcmParams, InclusionVector, ModelTarget, MoveKind,
    Mutation, XScaling,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

const P_ORACLE: usize = 4;
const TAU: f64 = 1.0 / P_ORACLE as f64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn oracle_target<F: Fn(&[f64]) -> f64>(n: usize, grid: GridSpec, seed: u64, f: F) -> ModelTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, P_ORACLE, |_, _| rng.random::<f64>());
    let y = DVector::from_fn(n, |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        f(&row) + rng.sample::<f64, _>(StandardNormal)
    });
    let d = Dataset::new(x, y, XScaling::UnitRange).expect("valid data");
    ModelTarget::new(d.x_std, d.y_std, grid, MarginalScale::default()).expect("valid target")
}

fn product_signal(amp: f64) -> impl Fn(&[f64]) -> f64 {
    move |x| amp * (std::f64::consts::PI * x[0] * x[1]).sin()
}

fn within(elapsed: Duration, limit_secs: u64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_secs as f64, format!("{s:.0}s (limit {limit_secs}s)"))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let target = oracle_target(20, default_grids(), 7, product_signal(20.0));
    let exact = ExactPosterior::enumerate(&target, 1, TAU).expect("enumeration");
    let dmtm = DmtmParams::new(P_ORACLE, 1.5);
    let chain = sample_chain(
        &target,
        &exact,
        exact.state(0),
        200_000,
        &dmtm,
        &IcmParams::default(),
        0.0,
        11,
    )
    .expect("chain");
    let tv = check_stationarity(&chain[1_000..], &exact).expect("tv");
    let (fast, time) = within(start.elapsed(), 180);
    Verdict {
        pass: tv < 0.02 && fast,
        detail: format!("TV = {tv:.4} (< 0.02) over {} states, {time}", exact.n_states()),
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let target = oracle_target(50, default_grids(), 7, |x| {
        10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 40.0 * (x[2] - 0.5).powi(2)
    });
    let exact = ExactPosterior::enumerate(&target, 2, TAU).expect("enumeration");
    let table = exact.table();
    let dmtm = DmtmParams::new(P_ORACLE, 1.5);
    let chain = sample_chain(
        &table,
        &exact,
        exact.state(0),
        500_000,
        &dmtm,
        &IcmParams::default(),
        0.5,
        12,
    )
    .expect("chain");
    let tv = check_stationarity(&chain[1_000..], &exact).expect("tv");
    let (fast, time) = within(start.elapsed(), 300);
    Verdict {
        pass: tv < 0.03 && fast,
        detail: format!("TV = {tv:.4} (< 0.03) over {} states, {time}", exact.n_states()),
    }
}

fn describe(r: &BalanceReport) -> String {
    format!(
        "{}: {} pairs, max|z| {:.2}, |z|>3: {}, >{:.2}: {}",
        r.kind.label(),
        r.rows.len(),
        r.max_abs_z,
        r.flagged,
        r.bonferroni_z,
        r.bonferroni_flagged
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let single = oracle_target(20, default_grids(), 7, product_signal(5.0));
    let e1 = ExactPosterior::enumerate(&single, 1, TAU).expect("enumeration");
    let t1 = e1.table();
    let mut lines = Vec::new();
    let mut pass = true;
    let dmtm_kinds = [MoveKind::Add, MoveKind::Remove, MoveKind::Swap];
    let balance = |mutation: Mutation| -> Vec<BalanceReport> {
        let mut params = DmtmParams::new(P_ORACLE, 1.5);
        params.mutation = mutation;
        dmtm_kinds
            .iter()
            .map(|&k| check_dmtm_balance(&t1, &e1, k, &params, 4 * MIN_TRIALS, 31).expect("flux"))
            .collect()
    };
    for r in balance(Mutation::None) {
        pass &= r.passes();
        lines.push(describe(&r));
    }
    let grid = GridSpec::new(vec![0.0, 1.0], vec![default_grids().lambda_values()[2]], 0.0, 0.0)
        .expect("grid");
    let pair = oracle_target(20, grid, 7, product_signal(5.0));
    let e2 = ExactPosterior::enumerate(&pair, 2, TAU).expect("enumeration");
    for k in [MoveKind::CrossDonate, MoveKind::PairedDonate, MoveKind::PairedSwap] {
        let r = check_icm_balance(&e2.table(), &e2, k, &IcmParams::default(), MIN_TRIALS, 32)
            .expect("flux");
        pass &= r.passes();
        lines.push(describe(&r));
    }
    for m in [Mutation::DropWRatio, Mutation::DropOmegaRatio, Mutation::WrongReverse] {
        let reports = balance(m);
        let caught = reports.iter().any(|r| !r.passes());
        let worst = reports.iter().map(|r| r.max_abs_z).fold(0.0, f64::max);
        pass &= caught;
        lines.push(format!(
            "mutation {m:?}: {} (max|z| {worst:.1})",
            if caught { "flagged" } else { "NOT flagged" }
        ));
    }
    let (fast, time) = within(start.elapsed(), 300);
    lines.push(time);
    Verdict {
        pass: pass && fast,
        detail: lines.join("\n        "),
    }
}

/// `log int N(y | 0, s Sigma) IG(s | a, b) ds`, Simpson's rule in `u = ln s`.
fn quadrature_log_ml(y: &DVector<f64>, sigma: &DMatrix<f64>, a: f64, b: f64) -> f64 {
    let n = y.len() as f64;
    let c = Cholesky::new(sigma.clone()).expect("positive definite");
    let logdet = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let q = y.dot(&c.solve(y));
    let log_integrand = |u: f64| {
        let s = u.exp();
        -0.5 * n * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * logdet - q / (2.0 * s)
            + a * b.ln()
            - ln_gamma(a)
            - (a + 1.0) * u
            - b / s
            + u
    };
    let (lo, hi, m) = (-40.0, 40.0, 80_000usize);
    let h = (hi - lo) / m as f64;
    let vals: Vec<f64> = (0..=m).map(|i| log_integrand(lo + i as f64 * h)).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * (v - max).exp()
        })
        .sum();
    max + (sum * h / 3.0).ln()
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_quad: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=5);
        let p = rng.random_range(1..=3);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let g = InclusionVector::from_bools(&(0..p).map(|_| rng.random_bool(0.7)).collect::<Vec<_>>());
        let rho2 = rng.random_range(0.1..10.0);
        let k = se_covariance(&x, &g, rng.random_range(0.5..6.0)).expect("kernel").scaled(rho2);
        let y = DVector::from_fn(n, |_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        let scale = MarginalScale::new(a, b).expect("scale");
        let got = log_marginal_likelihood(&y, KernelRef::Dense(&k), &scale).expect("log ml");
        let sigma = k.values() + DMatrix::identity(n, n);
        worst_quad = worst_quad.max((got - quadrature_log_ml(&y, &sigma, a, b)).abs());
    }
    let mut worst_lr: f64 = 0.0;
    for n in [10usize, 40, 100] {
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        let g = InclusionVector::from_indices(3, &[0, 2]).expect("gamma");
        let k: KernelMatrix = se_covariance(&x, &g, 1.5).expect("kernel").scaled(4.0);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = MarginalScale::default();
        let dense = log_marginal_likelihood(&y, KernelRef::Dense(&k), &scale).expect("dense");
        let f = pivoted_lowrank(&k, n, 0.0).expect("factor");
        let low = log_marginal_likelihood(&y, KernelRef::LowRank(&f), &scale).expect("low rank");
        worst_lr = worst_lr.max((dense - low).abs());
    }
    Verdict {
        pass: worst_quad < 1e-5 && worst_lr < 1e-6,
        detail: format!(
            "max |quadrature diff| = {worst_quad:.2e} (< 1e-5), max |low-rank - dense| = {worst_lr:.2e} (< 1e-6)"
        ),
    }
}

/// Desk-scale runs shared by the recovery criteria.
struct Desk {
    friedman: ExperimentReport,
    single: ExperimentReport,
}

fn desk_experiment(function: TestFunction) -> (ExperimentReport, f64) {
    let mut spec = ExperimentSpec::new(function, 100, 50);
    spec.replicates = 3;
    spec.seed = 2024;
    let start = Instant::now();
    let report = run_experiment(&spec).expect("experiment");
    (report, start.elapsed().as_secs_f64())
}

fn criterion_5(desk: &mut Option<Desk>) -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut run = |f: TestFunction, limit: f64| {
        let (report, secs) = desk_experiment(f);
        let (m, se) = report.rmse_summary();
        let per: Vec<String> = report.replicates.iter().map(|r| format!("{:.2}", r.rmse)).collect();
        let ok = m <= limit && report.replicates.iter().all(|r| r.error.is_none());
        pass &= ok;
        lines.push(format!(
            "{}: RMSE {m:.2} ± {se:.2} (≤ {limit}) per replicate [{}], {:.0}s",
            f.name(),
            per.join(", "),
            secs
        ));
        report
    };
    let friedman = run(TestFunction::Friedman, 2.5);
    run(TestFunction::Linear, 2.2);
    let single = run(TestFunction::Single, 3.5);
    *desk = Some(Desk { friedman, single });
    Verdict {
        pass,
        detail: lines.join("\n        "),
    }
}

fn desk(cache: &mut Option<Desk>) -> &Desk {
    if cache.is_none() {
        *cache = Some(Desk {
            friedman: desk_experiment(TestFunction::Friedman).0,
            single: desk_experiment(TestFunction::Single).0,
        });
    }
    cache.as_ref().expect("filled")
}

fn criterion_6(cache: &mut Option<Desk>) -> Verdict {
    let report = &desk(cache).single;
    let hits = report
        .replicates
        .iter()
        .filter(|r| r.recall == 1.0 && r.false_positives <= 2)
        .count();
    let per: Vec<String> = report
        .replicates
        .iter()
        .map(|r| {
            format!(
                "pi1 {:.2} pi2 {:.2} fp {}",
                r.marginal_inclusion[0], r.marginal_inclusion[1], r.false_positives
            )
        })
        .collect();
    Verdict {
        pass: hits >= 2,
        detail: format!("{hits}/3 replicates recover {{1,2}} with ≤ 2 false positives [{}]", per.join("; ")),
    }
}

fn criterion_7(cache: &mut Option<Desk>) -> Verdict {
    let report = &desk(cache).friedman;
    let s2: Vec<f64> = report.replicates.iter().map(|r| r.sigma2_mean).collect();
    let (m, _) = mean_se(&s2);
    let per: Vec<String> = s2.iter().map(|v| format!("{v:.2}")).collect();
    Verdict {
        pass: (0.5..=2.0).contains(&m),
        detail: format!("posterior mean sigma^2 {m:.2} (in [0.5, 2.0]) per replicate [{}]", per.join(", ")),
    }
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("AGP_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));
    let names = [
        "oracle stationarity, DMTM, p=4 k=1",
        "joint stationarity with ICM, p=4 k=2",
        "detailed-balance flux and mutations",
        "likelihood vs quadrature and low-rank",
        "desk-scale predictive RMSE, p=50",
        "support recovery, single component",
        "noise recovery, Friedman p=50",
    ];
    let mut cache = None;
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        let v = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut cache),
            6 => criterion_6(&mut cache),
            _ => criterion_7(&mut cache),
        };
        if !v.pass {
            failures += 1;
        }
        println!(
            "[{}] criterion {id}: {name}\n        {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("criterion 8 (p = 1000 study) is not gated; run scripts/table2_p1000.sh");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} gating criteria failed");
        ExitCode::FAILURE
    }
}
