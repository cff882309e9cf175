//! Benchmark protocol: synthetic multisite data generation, allocation
//! scenarios, Monte Carlo replication, and worst-case evaluation.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::aggregate::{
    self, CatePredictionMatrix, EnsembleCateModel, MethodTag,
};
use crate::error::{CateForgeError, Result};
use crate::learners::{self, FnPredictor, LearnerConfig, SharedPredictor, SiteDataset};
use crate::qp::QpOptions;
use crate::rng::{
    self, bernoulli, standard_normal, substream, STREAM_NOISE, STREAM_SITE_DATA,
    STREAM_SITE_PARAMS, STREAM_TARGET,
};

pub const COVARIATE_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    A,
    B,
}

/// Data-generating-process configuration for one study.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub setting: Setting,
    pub n_sites: usize,
    pub site_alphas: Option<Vec<f64>>,
    pub site_betas: Option<Vec<f64>>,
    pub allocation: Vec<f64>,
    pub n_total: usize,
    pub n_target: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Site parameters are sampled once per study by default; set to
    /// resample them independently in every replication.
    pub resample_params_per_rep: bool,
}

impl DgpConfig {
    pub fn new(setting: Setting, n_sites: usize, seed: u64) -> Self {
        DgpConfig {
            setting,
            n_sites,
            site_alphas: None,
            site_betas: None,
            allocation: vec![1.0 / n_sites as f64; n_sites],
            n_total: 5000,
            n_target: 10_000,
            noise_sd: 1.0,
            seed,
            resample_params_per_rep: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(CateForgeError::invalid("n_sites must be >= 1"));
        }
        if self.allocation.len() != self.n_sites {
            return Err(CateForgeError::invalid("allocation length must equal n_sites"));
        }
        if (self.allocation.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.allocation.iter().any(|q| *q < 0.0)
        {
            return Err(CateForgeError::invalid("allocation must lie on the simplex"));
        }
        if self.n_target == 0 {
            return Err(CateForgeError::invalid("n_target must be >= 1"));
        }
        for (s, &n) in self.site_sample_sizes().iter().enumerate() {
            if n < 20 {
                return Err(CateForgeError::invalid(format!(
                    "site {s} would receive {n} < 20 observations"
                )));
            }
        }
        Ok(())
    }

    /// Per-site counts by largest-remainder rounding of `n_total * q_mix`,
    /// so the counts sum to `n_total` exactly.
    pub fn site_sample_sizes(&self) -> Vec<usize> {
        largest_remainder_counts(self.n_total, &self.allocation)
    }
}

pub fn largest_remainder_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(total - assigned) {
        counts[remainders[k % weights.len()].0] += 1;
    }
    counts
}

/// Draws site parameters i.i.d. from the two-component normal mixture
/// `0.7 N(0, 0.75^2) + 0.3 N(3, 0.75^2)`.
pub fn sample_site_params(n_sites: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = substream(seed, &[STREAM_SITE_PARAMS]);
    let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
        let mean = if rng::uniform_open01(rng) < 0.7 { 0.0 } else { 3.0 };
        mean + 0.75 * standard_normal(rng)
    };
    let mut alphas = Vec::with_capacity(n_sites);
    let mut betas = Vec::with_capacity(n_sites);
    for _ in 0..n_sites {
        alphas.push(draw(&mut rng));
        betas.push(draw(&mut rng));
    }
    (alphas, betas)
}

/// The true site CATE functions for a configured setting, plus the mixture
/// evaluator over them.
#[derive(Debug, Clone)]
pub struct TrueCateBank {
    pub setting: Setting,
    pub betas: Vec<f64>,
}

fn logistic_bump(v: f64) -> f64 {
    2.0 / (1.0 + (-12.0 * (v - 0.5)).exp())
}

impl TrueCateBank {
    pub fn new(setting: Setting, betas: Vec<f64>) -> Self {
        TrueCateBank { setting, betas }
    }

    pub fn n_sites(&self) -> usize {
        self.betas.len()
    }

    /// True CATE of site `s` (0-based) at covariates `x`.
    pub fn tau(&self, s: usize, x: &[f64]) -> f64 {
        let beta = self.betas[s];
        match self.setting {
            Setting::A => setting_a_tau(beta, x),
            Setting::B => {
                // Functional families assigned by site block: 1-3, 4-6, 7+.
                if s < 3 {
                    beta * 0.6 + logistic_bump(x[0]) * logistic_bump(x[4])
                } else if s < 6 {
                    setting_a_tau(beta, x)
                } else {
                    beta * 0.5 * x[1] * x[1] + 0.3 * (x[2] + x[3])
                }
            }
        }
    }

    /// Control-arm conditional mean `alpha x1 + x2 + ... + x5`.
    pub fn mu0(&self, alpha: f64, x: &[f64]) -> f64 {
        alpha * x[0] + x[1..COVARIATE_DIM].iter().sum::<f64>()
    }

    /// Mixture CATE `tau_Q(x; q) = sum_s q_s tau_s(x)`.
    pub fn mixture_tau(&self, weights: &[f64], x: &[f64]) -> f64 {
        weights
            .iter()
            .enumerate()
            .map(|(s, q)| q * self.tau(s, x))
            .sum()
    }

    /// Site truths evaluated on every target row: `n_Q x S`.
    pub fn truth_matrix(&self, target: &Array2<f64>) -> Array2<f64> {
        let n = target.nrows();
        let s = self.n_sites();
        let mut out = Array2::zeros((n, s));
        for i in 0..n {
            let row = target.row(i);
            let x = row.as_slice().unwrap();
            for j in 0..s {
                out[[i, j]] = self.tau(j, x);
            }
        }
        out
    }
}

fn setting_a_tau(beta: f64, x: &[f64]) -> f64 {
    let hinge = if x[0] > 0.0 { x[0] } else { 0.0 };
    beta * hinge + 0.2 * (x[0] * x[1] + x[1] * x[2])
}

/// Returns the true CATE mixture as a shareable predictor.
pub fn make_mixture_target(weights: Vec<f64>, bank: TrueCateBank) -> SharedPredictor {
    std::sync::Arc::new(FnPredictor(move |x: &[f64]| bank.mixture_tau(&weights, x)))
}

/// Simulates one site: `X ~ N(0, I5)`, `A ~ Bernoulli(0.5)`,
/// `Y = mu0 + A tau + noise`. Each (replication, site) pair owns its own
/// generator sub-stream.
pub fn generate_site(
    config: &DgpConfig,
    site: usize,
    alphas: &[f64],
    bank: &TrueCateBank,
    rep: u64,
) -> Result<SiteDataset> {
    let n = config.site_sample_sizes()[site];
    if n < 20 {
        return Err(CateForgeError::invalid(format!(
            "site {site} allocated fewer than 20 observations"
        )));
    }
    let mut rng = substream(config.seed, &[STREAM_SITE_DATA, rep, site as u64]);
    let mut x = Array2::zeros((n, COVARIATE_DIM));
    let mut a = Vec::with_capacity(n);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for j in 0..COVARIATE_DIM {
            x[[i, j]] = standard_normal(&mut rng);
        }
        let treat = bernoulli(&mut rng, 0.5) as u8;
        a.push(treat);
        let row = x.row(i);
        let xs = row.as_slice().unwrap();
        let mu = bank.mu0(alphas[site], xs);
        let tau = bank.tau(site, xs);
        y[i] = mu + treat as f64 * tau + config.noise_sd * standard_normal(&mut rng);
    }
    SiteDataset::new(y, a, x, format!("site_{}", site + 1))
}

/// Target covariates `X^Q ~ N(0, I5)` (no covariate shift).
pub fn generate_target_covariates(config: &DgpConfig, rep: u64) -> Array2<f64> {
    let mut rng = substream(config.seed, &[STREAM_TARGET, rep]);
    Array2::from_shape_fn((config.n_target, COVARIATE_DIM), |_| {
        standard_normal(&mut rng)
    })
}

/// Which half is oversampled in the half-and-half scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    First,
    Second,
}

/// Sample allocation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationScenario {
    /// Equal weights.
    Balanced,
    /// The designated half has three times the weight of the other half.
    HalfAndHalf(Half),
    /// One site (0-based index) has ten times the weight of the others.
    OneLarge(usize),
}

pub fn make_allocation(scenario: AllocationScenario, n_sites: usize) -> Result<Vec<f64>> {
    match scenario {
        AllocationScenario::Balanced => Ok(vec![1.0 / n_sites as f64; n_sites]),
        AllocationScenario::HalfAndHalf(half) => {
            if n_sites % 2 != 0 {
                return Err(CateForgeError::invalid(
                    "half-and-half allocation needs an even number of sites",
                ));
            }
            let small = 1.0 / (2.0 * n_sites as f64);
            let large = 3.0 * small;
            let cut = n_sites / 2;
            Ok((0..n_sites)
                .map(|s| match half {
                    Half::First => if s < cut { large } else { small },
                    Half::Second => if s < cut { small } else { large },
                })
                .collect())
        }
        AllocationScenario::OneLarge(index) => {
            if index >= n_sites {
                return Err(CateForgeError::invalid("one-large site index out of range"));
            }
            let small = 1.0 / (n_sites as f64 + 9.0);
            Ok((0..n_sites)
                .map(|s| if s == index { 10.0 * small } else { small })
                .collect())
        }
    }
}

/// How site-specific CATE models are obtained in a replication.
#[derive(Debug, Clone)]
pub enum SiteModelSpec {
    /// Fit the configured meta-learner on simulated site data.
    Learner(LearnerConfig),
    /// Use the true site CATE functions directly.
    Oracle,
    /// True functions plus independent N(0, delta^2) perturbation of the
    /// predictions on the target draws.
    NoisyOracle { delta: f64 },
}

/// Aggregation methods benchmarked by the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Regret,
    RelativeRiskZero,
    Risk2Site { sigma1_sq: f64, sigma2_sq: f64 },
    Pooled,
}

impl Method {
    pub fn tag(&self) -> MethodTag {
        match self {
            Method::Regret => MethodTag::Regret,
            Method::RelativeRiskZero => MethodTag::RelativeRisk,
            Method::Risk2Site { .. } => MethodTag::Risk2Site,
            Method::Pooled => MethodTag::Pooled,
        }
    }
}

/// Per-method outcome of a single replication.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: MethodTag,
    pub weights: Vec<f64>,
    pub per_site_regret: Vec<f64>,
    pub worst_case_regret: f64,
}

/// Everything measured in one replication.
#[derive(Debug, Clone)]
pub struct ReplicationReport {
    pub rep_index: u64,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
    /// RMSE of each site model against its own true CATE on target draws.
    pub site_rmse: Vec<f64>,
    pub wall_clock_secs: f64,
}

fn dummy_predictors(s: usize) -> Vec<SharedPredictor> {
    (0..s)
        .map(|_| std::sync::Arc::new(FnPredictor(|_: &[f64]| 0.0)) as SharedPredictor)
        .collect()
}

fn evaluate_method(
    tag: MethodTag,
    weights: &Array1<f64>,
    model_preds: &Array1<f64>,
    truth: &Array2<f64>,
) -> Result<MethodReport> {
    let s = truth.ncols();
    let mut per_site = Vec::with_capacity(s);
    for j in 0..s {
        per_site.push(aggregate::empirical_regret(
            model_preds,
            &truth.column(j).to_owned(),
        )?);
    }
    let worst = per_site.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(MethodReport {
        method: tag,
        weights: weights.to_vec(),
        per_site_regret: per_site,
        worst_case_regret: worst,
    })
}

/// Runs one replication: simulate (or shortcut via oracle), aggregate with
/// each requested method, and evaluate empirical regrets on the target
/// draws against each site's true CATE.
pub fn run_replication(
    config: &DgpConfig,
    methods: &[Method],
    site_models: &SiteModelSpec,
    rep: u64,
) -> Result<ReplicationReport> {
    let start = Instant::now();
    config.validate()?;
    let s = config.n_sites;
    let (alphas, betas) = match (&config.site_alphas, &config.site_betas) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => {
            let param_seed = if config.resample_params_per_rep {
                config.seed.wrapping_add(rep.wrapping_mul(0x9E37_79B9))
            } else {
                config.seed
            };
            sample_site_params(s, param_seed)
        }
    };
    let bank = TrueCateBank::new(config.setting, betas);
    let target = generate_target_covariates(config, rep);
    let truth = bank.truth_matrix(&target);

    // Site prediction columns on the target draws.
    let (preds, site_data): (CatePredictionMatrix, Option<Vec<SiteDataset>>) = match site_models {
        SiteModelSpec::Oracle => {
            let ids = (1..=s).map(|i| format!("site_{i}")).collect();
            (CatePredictionMatrix::new(truth.clone(), ids)?, None)
        }
        SiteModelSpec::NoisyOracle { delta } => {
            let mut values = truth.clone();
            for j in 0..s {
                let mut noise_rng = substream(config.seed, &[STREAM_NOISE, rep, j as u64]);
                for i in 0..values.nrows() {
                    values[[i, j]] += delta * standard_normal(&mut noise_rng);
                }
            }
            let ids = (1..=s).map(|i| format!("site_{i}")).collect();
            (CatePredictionMatrix::new(values, ids)?, None)
        }
        SiteModelSpec::Learner(learner) => {
            let mut sites = Vec::with_capacity(s);
            let mut predictors: Vec<SharedPredictor> = Vec::with_capacity(s);
            for site in 0..s {
                let data = generate_site(config, site, &alphas, &bank, rep)?;
                let cfg = LearnerConfig {
                    seed: learner.seed ^ (rep << 20) ^ site as u64,
                    ..*learner
                };
                predictors.push(learners::fit_cate_learner(&data, &cfg)?);
                sites.push(data);
            }
            let ids = (1..=s).map(|i| format!("site_{i}")).collect();
            (
                CatePredictionMatrix::from_predictors(&predictors, ids, &target)?,
                Some(sites),
            )
        }
    };

    let mut site_rmse = Vec::with_capacity(s);
    for j in 0..s {
        let mse = aggregate::empirical_regret(
            &preds.values.column(j).to_owned(),
            &truth.column(j).to_owned(),
        )?;
        site_rmse.push(mse.sqrt());
    }

    let opts = QpOptions::default();
    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let report = match method {
            Method::Regret => {
                let (model, _) =
                    aggregate::fit_regret_ensemble(&preds, dummy_predictors(s), None, &opts)?;
                let model_preds = EnsembleCateModel::combine_columns(&model.weights, &preds);
                evaluate_method(MethodTag::Regret, &model.weights, &model_preds, &truth)?
            }
            Method::RelativeRiskZero => {
                let zero = Array1::zeros(config.n_target);
                let (model, _) = aggregate::fit_relative_risk_ensemble(
                    &preds,
                    &zero,
                    dummy_predictors(s),
                    None,
                    &opts,
                )?;
                let model_preds = EnsembleCateModel::combine_columns(&model.weights, &preds);
                evaluate_method(MethodTag::RelativeRisk, &model.weights, &model_preds, &truth)?
            }
            Method::Risk2Site {
                sigma1_sq,
                sigma2_sq,
            } => {
                let model = aggregate::fit_risk_2site_ensemble(
                    &preds,
                    *sigma1_sq,
                    *sigma2_sq,
                    dummy_predictors(s),
                )?;
                let model_preds = EnsembleCateModel::combine_columns(&model.weights, &preds);
                evaluate_method(MethodTag::Risk2Site, &model.weights, &model_preds, &truth)?
            }
            Method::Pooled => {
                let sites = site_data.as_ref().ok_or_else(|| {
                    CateForgeError::invalid(
                        "pooled method requires fitted site models, not oracle predictions",
                    )
                })?;
                let learner = match site_models {
                    SiteModelSpec::Learner(cfg) => LearnerConfig {
                        seed: cfg.seed ^ (rep << 20) ^ 0xF00D,
                        ..*cfg
                    },
                    _ => unreachable!(),
                };
                let model = aggregate::fit_pooled(sites, &learner)?;
                let model_preds = model.predict_rows(&target);
                let weights = Array1::from(vec![1.0]);
                evaluate_method(MethodTag::Pooled, &weights, &model_preds, &truth)?
            }
        };
        reports.push(report);
    }

    Ok(ReplicationReport {
        rep_index: rep,
        seed: config.seed,
        methods: reports,
        site_rmse,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Aggregated study results across replications.
#[derive(Debug, Clone)]
pub struct StudyTable {
    pub methods: Vec<MethodTag>,
    /// `[method][site]` mean empirical regret across replications.
    pub mean_site_regret: Vec<Vec<f64>>,
    /// Per-method mean of the worst-case regret.
    pub mean_worst_case: Vec<f64>,
    /// Per-method standard error of the worst-case regret mean.
    pub stderr_worst_case: Vec<f64>,
    pub n_reps: usize,
    pub reports: Vec<ReplicationReport>,
}

fn replication_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("CATE_FORGE_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            CateForgeError::invalid("CATE_FORGE_THREADS must be a positive integer")
        })?;
        if n == 0 {
            return Err(CateForgeError::invalid("CATE_FORGE_THREADS must be positive"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CateForgeError::invalid(format!("thread pool: {e}")))
}

/// Runs `n_reps` replications (in parallel, results ordered by replication
/// index) and averages per-site and worst-case regrets per method.
pub fn run_study(
    config: &DgpConfig,
    n_reps: usize,
    methods: &[Method],
    site_models: &SiteModelSpec,
) -> Result<StudyTable> {
    if n_reps == 0 {
        return Err(CateForgeError::invalid("n_reps must be >= 1"));
    }
    config.validate()?;
    let pool = replication_pool()?;
    let reports: Vec<Result<ReplicationReport>> = pool.install(|| {
        (0..n_reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(config, methods, site_models, rep))
            .collect()
    });
    let reports: Vec<ReplicationReport> = reports.into_iter().collect::<Result<Vec<_>>>()?;

    let tags: Vec<MethodTag> = methods.iter().map(Method::tag).collect();
    let s = config.n_sites;
    let mut mean_site_regret = vec![vec![0.0; s]; tags.len()];
    let mut mean_worst = vec![0.0; tags.len()];
    let mut stderr_worst = vec![0.0; tags.len()];
    for (m, _) in tags.iter().enumerate() {
        let worsts: Vec<f64> = reports
            .iter()
            .map(|r| r.methods[m].worst_case_regret)
            .collect();
        let mean = worsts.iter().sum::<f64>() / n_reps as f64;
        mean_worst[m] = mean;
        if n_reps > 1 {
            let var = worsts.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
                / (n_reps as f64 - 1.0);
            stderr_worst[m] = (var / n_reps as f64).sqrt();
        }
        for site in 0..s {
            mean_site_regret[m][site] = reports
                .iter()
                .map(|r| r.methods[m].per_site_regret[site])
                .sum::<f64>()
                / n_reps as f64;
        }
    }
    Ok(StudyTable {
        methods: tags,
        mean_site_regret,
        mean_worst_case: mean_worst,
        stderr_worst_case: stderr_worst,
        n_reps,
        reports,
    })
}
