//! `fit`, `predict` and `simulate`.

use std::path::{Path, PathBuf};

use agp_core::inference::{interaction_graph, predict, PosteriorSummary};
use agp_core::sampler::{retained, ChainStats};
use agp_core::simbench::{
    derive_seed, mean_se, rmse, run_experiment_detailed, ExperimentReport, ReplicateReport,
};
use agp_core::{
    run_chain, ChainOutput, ChainRecord, Dataset, ModelTarget, SamplerConfig, Standardization,
    XScaling,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::error::{usage, Result};
use crate::io::{read_chain, read_table, split_response, write_chain, write_csv, write_dataset, write_json};

pub const CHAIN_FILE: &str = "chain.jsonl";
pub const META_FILE: &str = "standardization.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Training-data metadata needed to predict from a saved fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub predictors: Vec<String>,
    pub response: String,
    pub scaling: XScaling,
    pub stats: Standardization,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub n: usize,
    pub p: usize,
    pub retained: usize,
    /// Posterior mean of the noise variance on the response scale.
    pub sigma2_mean: Option<f64>,
    pub dmtm_acceptance: f64,
    pub icm_acceptance: [f64; 3],
    pub stats: ChainStats,
    pub marginal_inclusion: Vec<f64>,
    pub variance_explained: Vec<f64>,
}

fn kept<'a>(records: &'a [ChainRecord], config: &SamplerConfig) -> Vec<&'a ChainRecord> {
    let kept = retained(records, config.burn_in, config.thin);
    if kept.is_empty() {
        records.iter().collect()
    } else {
        kept
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    a as f64 / b.max(1) as f64
}

/// Writes the chain, summaries, training data and config echo of one fit.
pub fn write_fit(
    dir: &Path,
    cfg: &RunConfig,
    data: &Dataset,
    response: &str,
    config: &SamplerConfig,
    chain: &ChainOutput,
) -> Result<FitSummary> {
    std::fs::create_dir_all(dir)?;
    let p = data.p();
    let y_var = data.stats.y_scale.powi(2);
    let records = kept(&chain.records, config);
    let summary = PosteriorSummary::from_records(&records, p)?;
    let graph = interaction_graph(&records, p, cfg.q.min(p), false)?;

    write_chain(&dir.join(CHAIN_FILE), &chain.records)?;
    write_dataset(&dir.join(TRAIN_FILE), &data.names, response, &data.x_raw, &data.y_raw)?;
    write_json(
        &dir.join(META_FILE),
        &FitMetadata {
            predictors: data.names.clone(),
            response: response.to_string(),
            scaling: cfg.x_scaling,
            stats: data.stats.clone(),
        },
    )?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.echo(Mode::Fit))?;
    write_csv(
        &dir.join("inclusion.csv"),
        &["predictor", "name", "inclusion"],
        summary
            .marginal_inclusion
            .iter()
            .enumerate()
            .map(|(j, v)| vec![(j + 1).to_string(), data.names[j].clone(), v.to_string()]),
    )?;
    write_csv(
        &dir.join("edges.csv"),
        &["j", "k", "name_j", "name_k", "weight"],
        graph.edges.iter().map(|&(j, k, w)| {
            vec![
                (j + 1).to_string(),
                (k + 1).to_string(),
                data.names[j].clone(),
                data.names[k].clone(),
                w.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("sigma2.csv"),
        &["iteration", "sigma2_std", "sigma2"],
        chain.records.iter().filter_map(|r| {
            r.sigma2.map(|s| vec![r.iteration.to_string(), s.to_string(), (s * y_var).to_string()])
        }),
    )?;
    let hist = |kind: &'static str, h: &[usize]| {
        h.iter()
            .enumerate()
            .map(move |(c, n)| vec![kind.to_string(), c.to_string(), n.to_string()])
            .collect::<Vec<_>>()
    };
    write_csv(
        &dir.join("histograms.csv"),
        &["kind", "count", "records"],
        hist("active", &summary.active_count_hist)
            .into_iter()
            .chain(hist("nonempty", &summary.nonempty_count_hist)),
    )?;
    let s = &chain.stats;
    let out = FitSummary {
        n: data.n(),
        p,
        retained: records.len(),
        sigma2_mean: summary.sigma2_mean().map(|v| v * y_var),
        dmtm_acceptance: ratio(s.dmtm_accepted, s.dmtm_proposed),
        icm_acceptance: std::array::from_fn(|i| ratio(s.icm_accepted[i], s.icm_proposed[i])),
        stats: s.clone(),
        marginal_inclusion: summary.marginal_inclusion,
        variance_explained: summary.variance_explained,
    };
    write_json(&dir.join("summary.json"), &out)?;
    Ok(out)
}

fn top_predictors(names: &[String], inclusion: &[f64], k: usize) -> String {
    let mut order: Vec<usize> = (0..inclusion.len()).collect();
    order.sort_by(|&a, &b| inclusion[b].total_cmp(&inclusion[a]));
    order
        .iter()
        .take(k)
        .map(|&j| format!("{} ({:.2})", names[j], inclusion[j]))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let path = cfg.data.as_ref().ok_or_else(|| usage("missing training data (--data)"))?;
    let table = read_table(path)?;
    let (names, x, y, response) = split_response(&table, cfg.response.as_deref())?;
    let data = Dataset::with_names(names, x, y, cfg.x_scaling)?;
    let config = cfg.sampler(data.p())?;
    let target = ModelTarget::new(data.x_std.clone(), data.y_std.clone(), cfg.grid()?, cfg.scale()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chain = run_chain(&target, &config, &mut rng)?;
    let dir = cfg.output_dir();
    let s = write_fit(&dir, cfg, &data, &response, &config, &chain)?;
    println!(
        "fit: n = {}, p = {}, {} iterations, {} retained records",
        s.n, s.p, config.iterations, s.retained
    );
    if let Some(v) = s.sigma2_mean {
        println!("posterior mean sigma^2 = {v:.4}");
    }
    println!("DMTM acceptance = {:.3}", s.dmtm_acceptance);
    println!("top predictors: {}", top_predictors(&data.names, &s.marginal_inclusion, 5));
    println!("wrote {}", dir.display());
    Ok(())
}

/// Predictions for the rows of `data` from the fit saved in `fit_dir`.
pub fn predict_from_fit(
    fit_dir: &Path,
    data: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    let meta_path = fit_dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(usage(format!(
            "missing standardization metadata {}",
            meta_path.display()
        )));
    }
    let meta: FitMetadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| usage(format!("{}: {e}", meta_path.display())))?;
    let cfg_path = fit_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(usage(format!("missing run configuration {}", cfg_path.display())));
    }
    let cfg = RunConfig::resolve(Some(&cfg_path), [])?;
    let p = meta.predictors.len();
    let config = cfg.sampler(p)?;

    let train = read_table(&fit_dir.join(TRAIN_FILE))?;
    let (names, x, y, _) = split_response(&train, Some(&meta.response))?;
    let train = Dataset::with_stats(names, x, y, meta.stats.clone())?;
    let records = read_chain(&fit_dir.join(CHAIN_FILE))?;
    if records.is_empty() {
        return Err(usage(format!("{} holds no records", fit_dir.join(CHAIN_FILE).display())));
    }

    let new = read_table(data)?;
    let cols: Vec<usize> = match meta
        .predictors
        .iter()
        .map(|n| new.column(n))
        .collect::<Option<Vec<_>>>()
    {
        Some(cols) => cols,
        None if new.names.len() == p => (0..p).collect(),
        None => {
            return Err(usage(format!(
                "column-count mismatch: {} has {} columns, the fit used {p} predictors ({})",
                data.display(),
                new.names.len(),
                meta.predictors.join(", ")
            )))
        }
    };
    let x_new = meta.stats.standardize_x(&new.matrix(&cols))?;
    let target = ModelTarget::new(train.x_std, train.y_std, cfg.grid()?, cfg.scale()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or_else(|| derive_seed(cfg.seed, 2)));
    let pred = predict(&target, &kept(&records, &config), &x_new, &meta.stats, &mut rng)?;

    let path = out.map_or_else(|| fit_dir.join("predictions.csv"), Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(
        &path,
        &["row", "mean", "lower", "upper"],
        (0..pred.mean.len()).map(|i| {
            vec![
                (i + 1).to_string(),
                pred.mean[i].to_string(),
                pred.lower[i].to_string(),
                pred.upper[i].to_string(),
            ]
        }),
    )?;
    println!("wrote {} predictions to {}", pred.mean.len(), path.display());
    if let Some(r) = new.column(&meta.response) {
        let observed: Vec<f64> = new.rows.iter().map(|row| row[r]).collect();
        println!("RMSE against {} = {}", meta.response, rmse(&pred.mean, &observed)?);
    }
    Ok(path)
}

fn replicate_label(r: &ReplicateReport) -> String {
    if r.icm {
        format!("replicate_{}", r.replicate)
    } else {
        format!("replicate_{}_noicm", r.replicate)
    }
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn simulate(cfg: &RunConfig, save_fits: bool) -> Result<ExperimentReport> {
    let spec = cfg.experiment()?;
    let results = run_experiment_detailed(&spec)?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(dir.join("replicates"))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.echo(Mode::Simulate))?;

    for (r, fit) in &results {
        write_json(&dir.join("replicates").join(format!("{}.json", replicate_label(r))), r)?;
        if let (true, Some(fit)) = (save_fits, fit) {
            let fit_dir = dir.join("fits").join(replicate_label(r));
            let mut fit_cfg = cfg.clone();
            fit_cfg.seed = fit.config.seed;
            fit_cfg.icm_prob = fit.config.icm_prob;
            fit_cfg.data = Some(fit_dir.join(TRAIN_FILE));
            fit_cfg.response = Some("y".into());
            fit_cfg.output_dir = Some(fit_dir.clone());
            write_fit(&fit_dir, &fit_cfg, &fit.data.train, "y", &fit.config, &fit.chain)?;
            write_dataset(
                &fit_dir.join("test.csv"),
                &fit.data.test.names,
                "y",
                &fit.data.test.x_raw,
                &fit.data.test.y_raw,
            )?;
            write_csv(
                &fit_dir.join("truth.csv"),
                &["row", "f"],
                fit.data.f_test.iter().enumerate().map(|(i, f)| vec![(i + 1).to_string(), f.to_string()]),
            )?;
        }
    }

    let reports: Vec<&ReplicateReport> = results.iter().map(|(r, _)| r).collect();
    write_csv(
        &dir.join("summary.csv"),
        &[
            "replicate", "icm", "seed", "rmse", "rmse_truth", "null_rmse", "coverage", "sigma2",
            "recall", "false_positives", "selected", "dmtm_acceptance", "error",
        ],
        reports.iter().map(|r| {
            vec![
                r.replicate.to_string(),
                r.icm.to_string(),
                r.seed.to_string(),
                r.rmse.to_string(),
                r.rmse_truth.to_string(),
                r.null_rmse.to_string(),
                r.coverage.to_string(),
                r.sigma2_mean.to_string(),
                r.recall.to_string(),
                r.false_positives.to_string(),
                fmt_list(&r.selected),
                r.dmtm_acceptance.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("inclusion.csv"),
        &["replicate", "icm", "predictor", "inclusion"],
        reports.iter().flat_map(|r| {
            r.marginal_inclusion.iter().enumerate().map(move |(j, v)| {
                vec![r.replicate.to_string(), r.icm.to_string(), (j + 1).to_string(), v.to_string()]
            })
        }),
    )?;
    write_csv(
        &dir.join("edges.csv"),
        &["replicate", "icm", "j", "k", "weight"],
        reports.iter().flat_map(|r| {
            r.edges.iter().map(move |(j, k, w)| {
                vec![
                    r.replicate.to_string(),
                    r.icm.to_string(),
                    j.to_string(),
                    k.to_string(),
                    w.to_string(),
                ]
            })
        }),
    )?;

    let (replicates, ablation): (Vec<_>, Vec<_>) =
        results.into_iter().map(|(r, _)| r).partition(|r| r.icm);
    let report = ExperimentReport {
        spec,
        replicates,
        ablation,
    };
    let ranking = mean_inclusion(&report.replicates, report.spec.p);
    let mut order: Vec<usize> = (0..ranking.len()).collect();
    order.sort_by(|&a, &b| ranking[b].total_cmp(&ranking[a]));
    write_csv(
        &dir.join("ranking.csv"),
        &["rank", "predictor", "mean_inclusion"],
        order
            .iter()
            .enumerate()
            .map(|(i, &j)| vec![(i + 1).to_string(), (j + 1).to_string(), ranking[j].to_string()]),
    )?;
    print_report(&report, &order, &ranking);
    println!("wrote {}", dir.display());
    Ok(report)
}

fn mean_inclusion(reports: &[ReplicateReport], p: usize) -> Vec<f64> {
    let ok: Vec<&ReplicateReport> = reports.iter().filter(|r| r.error.is_none()).collect();
    (0..p)
        .map(|j| ok.iter().map(|r| r.marginal_inclusion[j]).sum::<f64>() / ok.len().max(1) as f64)
        .collect()
}

fn print_report(report: &ExperimentReport, order: &[usize], ranking: &[f64]) {
    let spec = &report.spec;
    println!(
        "{}: n = {}, p = {}, {} replicates, {} iterations",
        spec.function.name(),
        spec.n,
        spec.p,
        spec.replicates,
        spec.sampler.iterations
    );
    for r in report.replicates.iter().chain(&report.ablation) {
        match &r.error {
            Some(e) => println!("  {}: failed: {e}", replicate_label(r)),
            None => println!(
                "  {}: rmse {:.3}, sigma^2 {:.3}, selected [{}], {:.0}s",
                replicate_label(r),
                r.rmse,
                r.sigma2_mean,
                fmt_list(&r.selected),
                r.seconds
            ),
        }
    }
    let (m, se) = report.rmse_summary();
    println!("RMSE {m:.3} (se {se:.3})");
    if let Some((m, se)) = report.ablation_rmse_summary() {
        println!("RMSE without inter-component moves {m:.3} (se {se:.3})");
    }
    let (s2, _) = mean_se(&report.replicates.iter().map(|r| r.sigma2_mean).collect::<Vec<_>>());
    println!("mean sigma^2 {s2:.3}");
    let top: Vec<String> = order
        .iter()
        .take(5)
        .map(|&j| format!("x{} ({:.2})", j + 1, ranking[j]))
        .collect();
    println!("top-ranked predictors: {}", top.join(", "));
}
