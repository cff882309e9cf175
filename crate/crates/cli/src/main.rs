use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use cate_forge::error::CateForgeError;
use cate_forge::io::{self, format_float, WeightsDocument};
use cate_forge::learners::{BaseConfig, LearnerConfig, MetaLearnerKind, PropensityConfig};
use cate_forge::oracle;
use cate_forge::qp::{self, QpOptions};
use cate_forge::sim::{
    AllocationScenario, DgpConfig, Half, Method, Setting, SiteModelSpec,
};
use cate_forge::{
    estimate_gamma, fit_regret_ensemble, fit_relative_risk_ensemble, CatePredictionMatrix,
    Diagnostics,
};

/// Robust aggregation of multisite CATE models.
#[derive(Parser)]
#[command(name = "cate-forge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo benchmark and write study summaries.
    Simulate(SimulateArgs),
    /// Compute ensemble weights from a site prediction matrix.
    Weights(WeightsArgs),
    /// Combine site predictions with a stored weight vector.
    Aggregate(AggregateArgs),
    /// Score ensemble predictions against true site CATE columns.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation setting: a or b.
    #[arg(long, default_value = "a")]
    setting: String,
    #[arg(long, default_value_t = 10)]
    sites: usize,
    /// balanced | half-first | half-second | one-large:<k> (k is 1-based).
    #[arg(long, default_value = "balanced")]
    allocation: String,
    #[arg(long, default_value_t = 5000)]
    n_total: usize,
    #[arg(long, default_value_t = 10000)]
    n_target: usize,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Comma-separated: regret, relative-risk, pooled, risk-2site.
    #[arg(long, default_value = "regret,relative-risk,pooled")]
    methods: String,
    /// t | x | dr:<folds>
    #[arg(long, default_value = "t")]
    learner: String,
    /// ridge:<lambda> | knn:<k>
    #[arg(long, default_value = "ridge:1e-3")]
    base: String,
    /// known:<p> | logistic
    #[arg(long, default_value = "known:0.5")]
    propensity: String,
    /// learner | oracle | noisy-oracle:<delta>
    #[arg(long, default_value = "learner")]
    site_models: String,
    /// Resample site parameters independently in every replication.
    #[arg(long)]
    resample_params: bool,
    /// Noise variances for risk-2site, comma-separated.
    #[arg(long)]
    sigma_sq: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    /// CSV of site predictions on target draws, columns site_1..site_S.
    #[arg(long)]
    predictions: PathBuf,
    /// regret | relative-risk | risk-2site | pooled
    #[arg(long, default_value = "regret")]
    method: String,
    /// Baseline predictions (single `tau` column) for relative-risk;
    /// defaults to the zero baseline.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Site noise variances sigma1^2,sigma2^2 for risk-2site.
    #[arg(long)]
    sigma_sq: Option<String>,
    /// Site sample sizes for pooled weighting, e.g. 900,2100.
    #[arg(long)]
    site_sizes: Option<String>,
    /// Cross-check the solver against a brute-force grid search.
    #[arg(long)]
    oracle_check: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ensemble predictions as a single `tau` column.
    #[arg(long)]
    ensemble: PathBuf,
    /// True site CATE values on the same draws, columns site_1..site_S.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn invalid(msg: impl Into<String>) -> CateForgeError {
    CateForgeError::invalid(msg)
}

fn parse_setting(raw: &str) -> Result<Setting, CateForgeError> {
    match raw.to_ascii_lowercase().as_str() {
        "a" => Ok(Setting::A),
        "b" => Ok(Setting::B),
        other => Err(invalid(format!("unknown setting {other:?}; use a or b"))),
    }
}

fn parse_allocation(raw: &str, sites: usize) -> Result<Vec<f64>, CateForgeError> {
    let scenario = match raw {
        "balanced" => AllocationScenario::Balanced,
        "half-first" => AllocationScenario::HalfAndHalf(Half::First),
        "half-second" => AllocationScenario::HalfAndHalf(Half::Second),
        other => match other.strip_prefix("one-large:") {
            Some(k) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| invalid("one-large:<k> needs an integer site index"))?;
                if k == 0 {
                    return Err(invalid("one-large site index is 1-based"));
                }
                AllocationScenario::OneLarge(k - 1)
            }
            None => {
                return Err(invalid(format!(
                    "unknown allocation {other:?}; use balanced, half-first, half-second, or one-large:<k>"
                )))
            }
        },
    };
    cate_forge::make_allocation(scenario, sites)
}

fn parse_sigma_pair(raw: &Option<String>) -> Result<(f64, f64), CateForgeError> {
    let raw = raw
        .as_deref()
        .ok_or_else(|| invalid("risk-2site requires --sigma-sq <s1>,<s2>"))?;
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 2 {
        return Err(invalid("--sigma-sq takes exactly two comma-separated values"));
    }
    let s1 = parts[0]
        .trim()
        .parse()
        .map_err(|_| invalid("bad sigma1^2 value"))?;
    let s2 = parts[1]
        .trim()
        .parse()
        .map_err(|_| invalid("bad sigma2^2 value"))?;
    Ok((s1, s2))
}

fn parse_methods(
    raw: &str,
    sigma_sq: &Option<String>,
) -> Result<Vec<Method>, CateForgeError> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        let method = match part {
            "regret" => Method::Regret,
            "relative-risk" => Method::RelativeRiskZero,
            "pooled" => Method::Pooled,
            "risk-2site" => {
                let (sigma1_sq, sigma2_sq) = parse_sigma_pair(sigma_sq)?;
                Method::Risk2Site {
                    sigma1_sq,
                    sigma2_sq,
                }
            }
            other => return Err(invalid(format!("unknown method {other:?}"))),
        };
        out.push(method);
    }
    if out.is_empty() {
        return Err(invalid("no methods requested"));
    }
    Ok(out)
}

fn parse_learner(
    learner: &str,
    base: &str,
    propensity: &str,
) -> Result<LearnerConfig, CateForgeError> {
    let meta = match learner {
        "t" => MetaLearnerKind::TLearner,
        "x" => MetaLearnerKind::XLearner,
        other => match other.strip_prefix("dr:") {
            Some(folds) => MetaLearnerKind::DrLearner {
                folds: folds.parse().map_err(|_| invalid("bad dr fold count"))?,
            },
            None if other == "dr" => MetaLearnerKind::DrLearner { folds: 2 },
            None => return Err(invalid(format!("unknown learner {other:?}"))),
        },
    };
    let base = if let Some(lambda) = base.strip_prefix("ridge:") {
        BaseConfig::RidgePoly {
            lambda: lambda.parse().map_err(|_| invalid("bad ridge lambda"))?,
        }
    } else if base == "ridge" {
        BaseConfig::RidgePoly { lambda: 1e-3 }
    } else if let Some(k) = base.strip_prefix("knn:") {
        BaseConfig::Knn {
            k: k.parse().map_err(|_| invalid("bad knn k"))?,
        }
    } else if base == "knn" {
        BaseConfig::Knn { k: 10 }
    } else {
        return Err(invalid(format!("unknown base learner {base:?}")));
    };
    let propensity = if let Some(p) = propensity.strip_prefix("known:") {
        PropensityConfig::KnownConstant(p.parse().map_err(|_| invalid("bad propensity"))?)
    } else if propensity == "known" {
        PropensityConfig::KnownConstant(0.5)
    } else if propensity == "logistic" {
        PropensityConfig::Logistic
    } else {
        return Err(invalid(format!("unknown propensity model {propensity:?}")));
    };
    Ok(LearnerConfig {
        meta,
        base,
        propensity,
        seed: 0,
    })
}

fn parse_site_models(raw: &str, learner: LearnerConfig) -> Result<SiteModelSpec, CateForgeError> {
    match raw {
        "learner" => Ok(SiteModelSpec::Learner(learner)),
        "oracle" => Ok(SiteModelSpec::Oracle),
        other => match other.strip_prefix("noisy-oracle:") {
            Some(delta) => Ok(SiteModelSpec::NoisyOracle {
                delta: delta.parse().map_err(|_| invalid("bad noisy-oracle delta"))?,
            }),
            None => Err(invalid(format!("unknown site-models value {other:?}"))),
        },
    }
}

fn read_tau_column(path: &Path) -> Result<Array1<f64>, CateForgeError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CateForgeError::parse(path.display().to_string(), format!("cannot open: {e}"))
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("tau") => {}
        other => {
            return Err(CateForgeError::parse(
                format!("{}, header", path.display()),
                format!("expected single column 'tau', got {other:?}"),
            ))
        }
    }
    let mut values = Vec::new();
    for (idx, line) in lines.enumerate() {
        let v: f64 = line.trim().parse().map_err(|_| {
            CateForgeError::parse(
                format!("{}, line {}", path.display(), idx + 2),
                format!("expected a number, got {line:?}"),
            )
        })?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(CateForgeError::parse(path.display().to_string(), "no data rows"));
    }
    Ok(Array1::from(values))
}

fn write_tau_column(path: &Path, values: &Array1<f64>) -> Result<(), CateForgeError> {
    let mut out = String::from("tau\n");
    for v in values {
        out.push_str(&format_float(*v));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<(), CateForgeError> {
    let mut config = DgpConfig::new(parse_setting(&args.setting)?, args.sites, args.seed);
    config.allocation = parse_allocation(&args.allocation, args.sites)?;
    config.n_total = args.n_total;
    config.n_target = args.n_target;
    config.noise_sd = args.noise_sd;
    config.resample_params_per_rep = args.resample_params;
    let methods = parse_methods(&args.methods, &args.sigma_sq)?;
    let learner = parse_learner(&args.learner, &args.base, &args.propensity)?;
    let site_models = parse_site_models(&args.site_models, learner)?;

    let study = cate_forge::run_study(&config, args.reps, &methods, &site_models)?;
    std::fs::create_dir_all(&args.out_dir)?;
    io::write_study_csv(&args.out_dir.join("study.csv"), &study)?;
    io::write_plotdata_csv(&args.out_dir.join("plotdata.csv"), &study)?;
    for (m, tag) in study.methods.iter().enumerate() {
        println!(
            "{}: mean worst-case regret {:.6} (se {:.6})",
            tag.as_str(),
            study.mean_worst_case[m],
            study.stderr_worst_case[m],
        );
    }
    Ok(())
}

fn dummy_predictors(s: usize) -> Vec<cate_forge::SharedPredictor> {
    use cate_forge::learners::FnPredictor;
    (0..s)
        .map(|_| std::sync::Arc::new(FnPredictor(|_: &[f64]| 0.0)) as cate_forge::SharedPredictor)
        .collect()
}

fn oracle_check(
    preds: &CatePredictionMatrix,
    c: &Array1<f64>,
    weights: &Array1<f64>,
) -> Result<(), CateForgeError> {
    let system = estimate_gamma(preds)?;
    let solver_obj = weights.dot(&system.gamma().dot(weights)) + c.dot(weights);
    let (_, grid_obj) = oracle::minimize_qp_on_simplex_grid(system.gamma(), c, 1e-3);
    let gap = solver_obj - grid_obj;
    eprintln!("oracle check: solver objective {solver_obj:.12e}, grid objective {grid_obj:.12e}");
    if gap > 1e-6 {
        return Err(CateForgeError::NonConvergence { iterations: 0 });
    }
    Ok(())
}

fn run_weights(args: &WeightsArgs) -> Result<(), CateForgeError> {
    let (values, ids) = io::read_predictions_csv(&args.predictions)?;
    let preds = CatePredictionMatrix::new(values, ids)?;
    let s = preds.n_sites();
    let opts = QpOptions::default();

    let (tag, weights, diagnostics): (&str, Array1<f64>, Diagnostics) =
        match args.method.as_str() {
            "regret" => {
                let (model, diag) =
                    fit_regret_ensemble(&preds, dummy_predictors(s), None, &opts)?;
                if args.oracle_check {
                    let system = estimate_gamma(&preds)?;
                    let c = system.d().mapv(|v| -v);
                    oracle_check(&preds, &c, &model.weights)?;
                }
                ("regret", model.weights, diag)
            }
            "relative-risk" => {
                let baseline = match &args.baseline {
                    Some(path) => {
                        let b = read_tau_column(path)?;
                        if b.len() != preds.n_target() {
                            return Err(invalid(
                                "baseline length does not match prediction rows",
                            ));
                        }
                        b
                    }
                    None => Array1::zeros(preds.n_target()),
                };
                let (model, diag) = fit_relative_risk_ensemble(
                    &preds,
                    &baseline,
                    dummy_predictors(s),
                    None,
                    &opts,
                )?;
                if args.oracle_check {
                    let n = preds.n_target();
                    let mut c = Array1::zeros(s);
                    for j in 0..s {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += preds.values[[i, j]] * baseline[i];
                        }
                        c[j] = -2.0 * acc / n as f64;
                    }
                    oracle_check(&preds, &c, &model.weights)?;
                }
                ("relative_risk", model.weights, diag)
            }
            "risk-2site" => {
                let (s1, s2) = parse_sigma_pair(&args.sigma_sq)?;
                let model = cate_forge::fit_risk_2site_ensemble(
                    &preds,
                    s1,
                    s2,
                    dummy_predictors(s),
                )?;
                let diag = diagnostics_for_fixed_weights(&preds, &model.weights)?;
                ("risk_2site", model.weights, diag)
            }
            "pooled" => {
                let raw = args.site_sizes.as_deref().ok_or_else(|| {
                    invalid("pooled weighting requires --site-sizes n1,n2,...")
                })?;
                let sizes: Vec<f64> = raw
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| invalid("bad --site-sizes value"))?;
                if sizes.len() != s {
                    return Err(invalid("--site-sizes length must match prediction columns"));
                }
                if sizes.iter().any(|n| *n <= 0.0) {
                    return Err(invalid("site sizes must be positive"));
                }
                let total: f64 = sizes.iter().sum();
                let weights = Array1::from_iter(sizes.iter().map(|n| n / total));
                let diag = diagnostics_for_fixed_weights(&preds, &weights)?;
                ("pooled", weights, diag)
            }
            other => return Err(invalid(format!("unknown method {other:?}"))),
        };

    let doc = WeightsDocument::new(tag, weights.as_slice().unwrap(), &diagnostics);
    io::write_weights_json(&args.out, &doc)?;
    println!(
        "{tag}: weights [{}], worst-case regret {:.6}",
        weights
            .iter()
            .map(|w| format!("{w:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        diagnostics.worst_case_regret,
    );
    Ok(())
}

/// Certificates for a weight vector not produced by the QP solver: the KKT
/// residual reported is still meaningful as a distance from stationarity.
fn diagnostics_for_fixed_weights(
    preds: &CatePredictionMatrix,
    weights: &Array1<f64>,
) -> Result<Diagnostics, CateForgeError> {
    let system = estimate_gamma(preds)?;
    let per_site = system.per_site_regret(weights);
    let worst = per_site.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Diagnostics {
        lambda_min: cate_forge::linalg::lambda_min(system.gamma(), 200),
        kkt_residual: qp::kkt_residual(&system, weights)?,
        worst_case_regret: worst,
        per_site_regret: per_site,
        converged: true,
    })
}

fn run_aggregate(args: &AggregateArgs) -> Result<(), CateForgeError> {
    let (values, ids) = io::read_predictions_csv(&args.predictions)?;
    let preds = CatePredictionMatrix::new(values, ids)?;
    let doc = io::read_weights_json(&args.weights)?;
    if doc.weights.len() != preds.n_sites() {
        return Err(invalid(format!(
            "weight vector has {} entries but predictions have {} sites",
            doc.weights.len(),
            preds.n_sites()
        )));
    }
    let sum: f64 = doc.weights.iter().sum();
    if doc.weights.iter().any(|w| !w.is_finite() || *w < -1e-9) || (sum - 1.0).abs() > 1e-6 {
        return Err(invalid("weights must be nonnegative and sum to one"));
    }
    let weights = Array1::from(doc.weights.clone());
    let combined = cate_forge::EnsembleCateModel::combine_columns(&weights, &preds);
    write_tau_column(&args.out, &combined)?;
    println!("wrote {} combined predictions", combined.len());
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<(), CateForgeError> {
    let ensemble = read_tau_column(&args.ensemble)?;
    let (truth, _) = io::read_predictions_csv(&args.truth)?;
    if truth.nrows() != ensemble.len() {
        return Err(invalid("truth rows do not match ensemble predictions"));
    }
    let mut per_site = Vec::with_capacity(truth.ncols());
    for j in 0..truth.ncols() {
        per_site.push(cate_forge::empirical_regret(
            &ensemble,
            &truth.column(j).to_owned(),
        )?);
    }
    let worst = per_site.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let per_site_json: Vec<String> = per_site.iter().map(|r| format_float(*r)).collect();
    let json = format!(
        "{{\n  \"per_site_regret\": [{}],\n  \"worst_case_regret\": {}\n}}\n",
        per_site_json.join(", "),
        format_float(worst),
    );
    std::fs::write(&args.out, json)?;
    println!("worst-case regret {worst:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Weights(args) => run_weights(args),
        Command::Aggregate(args) => run_aggregate(args),
        Command::Evaluate(args) => run_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CateForgeError::NonConvergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
