//! Run configuration: `key = value` files, flag overrides and the echo that
//! reproduces a run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use agp_core::linalg::MarginalScale;
use agp_core::priors::{component_bounds, DEFAULT_CORRELATION_TARGETS, DEFAULT_R2_TARGETS};
use agp_core::simbench::{ExperimentSpec, TestFunction};
use agp_core::{GridSpec, SamplerConfig, XScaling};
use clap::Args;

use crate::error::{usage, Result};

pub const OUTPUT_DIR_ENV: &str = "AGP_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "agp-out";

/// Declares a group of optional string-valued flags, each mirroring a config key.
macro_rules! flag_group {
    ($(#[$meta:meta])* $name:ident {
        $($(#[doc = $doc:literal])* $field:ident => $key:literal $(| $alias:literal)?;)*
    }) => {
        $(#[$meta])*
        #[derive(Debug, Default, Clone, Args)]
        pub struct $name {
            $(
                $(#[doc = $doc])*
                #[arg(long = $key, value_name = "VALUE" $(, visible_alias = $alias)?)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push(($key, v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

flag_group! {
    /// Prior, grid and sampler settings shared by `fit` and `simulate`.
    SamplerFlags {
        /// Predictor scaling: unit-range, z-score or none
        x_scaling => "x-scaling";
        /// Prior expected component size d*
        d_star => "d-star";
        /// Comma-separated R^2 targets of the rho grid (first must be 0)
        rho_r2 => "rho-r2";
        /// Comma-separated correlation targets of the lambda grid
        lambda_corr => "lambda-corr";
        /// Beta-binomial exponent on the rho grid weights
        grid_alpha => "grid-alpha";
        /// Beta-binomial exponent on the lambda grid weights
        grid_beta => "grid-beta";
        /// Inverse-gamma shape of the noise prior
        a => "a";
        /// Inverse-gamma rate of the noise prior
        b => "b";
        /// Inclusion-bias exponent of the toggle weights
        alpha_incl => "alpha-incl";
        /// Likelihood budget per step, or auto (10 k_max)
        budget => "budget";
        /// Probability of an inter-component move
        icm_prob => "icm-prob";
        /// Importance learning-rate exponent in (1/2, 1]
        zeta => "zeta";
        /// Adapt predictor importance after burn-in (true/false)
        adapt_importance => "adapt-importance";
        /// Chain length
        iterations => "iterations" | "iters";
        /// Records discarded before summaries
        burn_in => "burn-in";
        /// Stride of retained records
        thin => "thin";
        /// Random seed
        seed => "seed";
        /// Minimum active components, or auto
        k_min => "k-min";
        /// Maximum components, or auto
        k_max => "k-max";
        /// Nodes in the interaction graph
        q => "q";
    }
}

flag_group! {
    /// Training data of `fit`.
    DataFlags {
        /// Headered CSV of predictors and response
        data => "data";
        /// Response column name (default: last column)
        response => "response";
    }
}

flag_group! {
    /// Simulation study settings of `simulate`.
    SimulationFlags {
        /// Test function: friedman, confounded, linear or single
        function => "fn";
        /// Training observations per replicate
        n => "n";
        /// Predictors
        p => "p";
        /// Replicates
        reps => "reps";
        /// Test observations per replicate
        n_test => "n-test";
        /// Inclusion threshold for support recovery
        threshold => "threshold";
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fit,
    Simulate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub function: Option<TestFunction>,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub n_test: usize,
    pub threshold: f64,
    pub icm_ablation: bool,
    pub x_scaling: XScaling,
    pub d_star: f64,
    pub rho_r2: Vec<f64>,
    pub lambda_corr: Vec<f64>,
    pub grid_alpha: f64,
    pub grid_beta: f64,
    pub a: f64,
    pub b: f64,
    pub alpha_incl: f64,
    pub budget: Option<usize>,
    pub icm_prob: f64,
    pub zeta: f64,
    pub adapt_importance: bool,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub q: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let scale = MarginalScale::default();
        Self {
            data: None,
            response: None,
            function: None,
            n: 100,
            p: 50,
            reps: 10,
            n_test: 200,
            threshold: 0.5,
            icm_ablation: false,
            x_scaling: XScaling::default(),
            d_star: s.d_star,
            rho_r2: DEFAULT_R2_TARGETS.to_vec(),
            lambda_corr: DEFAULT_CORRELATION_TARGETS.to_vec(),
            grid_alpha: 0.0,
            grid_beta: 0.0,
            a: scale.a(),
            b: scale.b(),
            alpha_incl: s.alpha_incl,
            budget: s.budget,
            icm_prob: s.icm_prob,
            zeta: s.zeta,
            adapt_importance: s.adapt_importance,
            iterations: s.iterations,
            burn_in: s.burn_in,
            thin: s.thin,
            seed: s.seed,
            k_min: None,
            k_max: None,
            q: 10,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for '{key}'")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(usage(format!("invalid value '{value}' for '{key}' (expected true or false)"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn auto<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Applies one `key = value` entry. Underscores and hyphens are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "data" => self.data = Some(PathBuf::from(value)),
            "response" => self.response = Some(value.to_string()),
            "fn" => {
                self.function =
                    Some(TestFunction::parse(value).map_err(|e| usage(e.to_string()))?)
            }
            "n" => self.n = parse(k, value)?,
            "p" => self.p = parse(k, value)?,
            "reps" => self.reps = parse(k, value)?,
            "n-test" => self.n_test = parse(k, value)?,
            "threshold" => self.threshold = parse(k, value)?,
            "icm-ablation" => self.icm_ablation = parse_bool(k, value)?,
            "x-scaling" => {
                self.x_scaling = XScaling::parse(value).map_err(|e| usage(e.to_string()))?
            }
            "d-star" => self.d_star = parse(k, value)?,
            "rho-r2" => self.rho_r2 = parse_list(k, value)?,
            "lambda-corr" => self.lambda_corr = parse_list(k, value)?,
            "grid-alpha" => self.grid_alpha = parse(k, value)?,
            "grid-beta" => self.grid_beta = parse(k, value)?,
            "a" => self.a = parse(k, value)?,
            "b" => self.b = parse(k, value)?,
            "alpha-incl" => self.alpha_incl = parse(k, value)?,
            "budget" => self.budget = parse_auto(k, value)?,
            "icm-prob" => self.icm_prob = parse(k, value)?,
            "zeta" => self.zeta = parse(k, value)?,
            "adapt-importance" => self.adapt_importance = parse_bool(k, value)?,
            "iterations" | "iters" => self.iterations = parse(k, value)?,
            "burn-in" => self.burn_in = parse(k, value)?,
            "thin" => self.thin = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "k-min" => self.k_min = parse_auto(k, value)?,
            "k-max" => self.k_max = parse_auto(k, value)?,
            "q" => self.q = parse(k, value)?,
            "output-dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(usage(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` starts a comment.
    pub fn read_file(path: &Path) -> Result<Vec<(String, String)>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                usage(format!("{}:{}: expected 'key = value'", path.display(), i + 1))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(entries)
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve<'a>(
        file: Option<&Path>,
        flags: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            for (k, v) in Self::read_file(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Output directory: config or flag, then the environment, then `agp-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::from_targets(
            &self.rho_r2,
            &self.lambda_corr,
            self.grid_alpha,
            self.grid_beta,
        )?)
    }

    pub fn scale(&self) -> Result<MarginalScale> {
        Ok(MarginalScale::new(self.a, self.b)?)
    }

    pub fn sampler(&self, p: usize) -> Result<SamplerConfig> {
        let k_bounds = if self.k_min.is_some() || self.k_max.is_some() {
            let (lo, hi) = component_bounds(p)?;
            Some((self.k_min.unwrap_or(lo), self.k_max.unwrap_or(hi)))
        } else {
            None
        };
        let cfg = SamplerConfig {
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
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self) -> Result<ExperimentSpec> {
        let function = self
            .function
            .ok_or_else(|| usage("missing test function (--fn)"))?;
        let mut spec = ExperimentSpec::new(function, self.n, self.p);
        spec.replicates = self.reps;
        spec.n_test = self.n_test;
        spec.seed = self.seed;
        spec.scaling = self.x_scaling;
        spec.sampler = self.sampler(self.p)?;
        spec.grid = self.grid()?;
        spec.scale = self.scale()?;
        spec.q = self.q;
        spec.threshold = self.threshold;
        spec.icm_ablation = self.icm_ablation;
        Ok(spec)
    }

    /// The resolved configuration as a config file for `mode`.
    pub fn echo(&self, mode: Mode) -> String {
        let mut lines: Vec<(&str, String)> = Vec::new();
        match mode {
            Mode::Fit => {
                if let Some(d) = &self.data {
                    lines.push(("data", d.display().to_string()));
                }
                if let Some(r) = &self.response {
                    lines.push(("response", r.clone()));
                }
            }
            Mode::Simulate => {
                if let Some(f) = self.function {
                    lines.push(("fn", f.name().to_string()));
                }
                lines.push(("n", self.n.to_string()));
                lines.push(("p", self.p.to_string()));
                lines.push(("reps", self.reps.to_string()));
                lines.push(("n-test", self.n_test.to_string()));
                lines.push(("threshold", self.threshold.to_string()));
                lines.push(("icm-ablation", self.icm_ablation.to_string()));
            }
        }
        lines.extend([
            ("x-scaling", self.x_scaling.label().to_string()),
            ("d-star", self.d_star.to_string()),
            ("rho-r2", join(&self.rho_r2)),
            ("lambda-corr", join(&self.lambda_corr)),
            ("grid-alpha", self.grid_alpha.to_string()),
            ("grid-beta", self.grid_beta.to_string()),
            ("a", self.a.to_string()),
            ("b", self.b.to_string()),
            ("alpha-incl", self.alpha_incl.to_string()),
            ("budget", auto(self.budget)),
            ("icm-prob", self.icm_prob.to_string()),
            ("zeta", self.zeta.to_string()),
            ("adapt-importance", self.adapt_importance.to_string()),
            ("iterations", self.iterations.to_string()),
            ("burn-in", self.burn_in.to_string()),
            ("thin", self.thin.to_string()),
            ("seed", self.seed.to_string()),
            ("k-min", auto(self.k_min)),
            ("k-max", auto(self.k_max)),
            ("q", self.q.to_string()),
            ("output-dir", self.output_dir().display().to_string()),
        ]);
        let mut s = String::from("# agp run configuration\n");
        for (k, v) in lines {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
