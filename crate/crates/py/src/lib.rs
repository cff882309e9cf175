//! Python bindings for the weight solvers, aggregation diagnostics, and a
//! small oracle-mode simulation entry point.

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cate_forge::error::CateForgeError;
use cate_forge::learners::FnPredictor;
use cate_forge::qp::QpOptions;
use cate_forge::sim::{DgpConfig, Method, Setting, SiteModelSpec};
use cate_forge::{CatePredictionMatrix, SharedPredictor};

fn to_py_err(err: CateForgeError) -> PyErr {
    match err {
        CateForgeError::NonConvergence { .. } => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("prediction matrix must be nonempty"));
    }
    let s = rows[0].len();
    if rows.iter().any(|r| r.len() != s) {
        return Err(PyValueError::new_err("ragged prediction matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / s, s), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn prediction_matrix(rows: Vec<Vec<f64>>) -> PyResult<CatePredictionMatrix> {
    let values = matrix_from_rows(rows)?;
    let ids = (1..=values.ncols()).map(|j| format!("site_{j}")).collect();
    CatePredictionMatrix::new(values, ids).map_err(to_py_err)
}

fn dummy_predictors(s: usize) -> Vec<SharedPredictor> {
    (0..s)
        .map(|_| std::sync::Arc::new(FnPredictor(|_: &[f64]| 0.0)) as SharedPredictor)
        .collect()
}

fn weights_dict<'py>(
    py: Python<'py>,
    weights: &Array1<f64>,
    diag: &cate_forge::Diagnostics,
) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new_bound(py);
    out.set_item("weights", weights.to_vec())?;
    out.set_item("worst_case_regret", diag.worst_case_regret)?;
    out.set_item("per_site_regret", diag.per_site_regret.to_vec())?;
    out.set_item("kkt_residual", diag.kkt_residual)?;
    out.set_item("lambda_min", diag.lambda_min)?;
    out.set_item("converged", diag.converged)?;
    Ok(out)
}

/// Euclidean projection of a vector onto the probability simplex.
#[pyfunction]
fn project_to_simplex(v: Vec<f64>) -> PyResult<Vec<f64>> {
    cate_forge::project_to_simplex(&Array1::from(v))
        .map(|q| q.to_vec())
        .map_err(to_py_err)
}

/// Minimax-regret ensemble weights from an `n x S` prediction matrix
/// (list of rows) on target covariate draws.
#[pyfunction]
fn regret_weights<'py>(py: Python<'py>, predictions: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let preds = prediction_matrix(predictions)?;
    let s = preds.n_sites();
    let (model, diag) =
        cate_forge::fit_regret_ensemble(&preds, dummy_predictors(s), None, &QpOptions::default())
            .map_err(to_py_err)?;
    weights_dict(py, &model.weights, &diag)
}

/// Minimax relative-risk weights against a baseline prediction vector
/// (pass zeros for the zero baseline).
#[pyfunction]
fn relative_risk_weights<'py>(
    py: Python<'py>,
    predictions: Vec<Vec<f64>>,
    baseline: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let preds = prediction_matrix(predictions)?;
    let s = preds.n_sites();
    let (model, diag) = cate_forge::fit_relative_risk_ensemble(
        &preds,
        &Array1::from(baseline),
        dummy_predictors(s),
        None,
        &QpOptions::default(),
    )
    .map_err(to_py_err)?;
    weights_dict(py, &model.weights, &diag)
}

/// Closed-form two-site minimax-risk weight on the first site.
#[pyfunction]
fn risk_2site_weight(sigma1_sq: f64, sigma2_sq: f64, dist_sq: f64) -> PyResult<f64> {
    cate_forge::risk_2site_weight(sigma1_sq, sigma2_sq, dist_sq).map_err(to_py_err)
}

/// Empirical second-moment matrix of the site predictions.
#[pyfunction]
fn estimate_gamma(predictions: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let preds = prediction_matrix(predictions)?;
    let system = cate_forge::estimate_gamma(&preds).map_err(to_py_err)?;
    Ok(system
        .gamma()
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect())
}

/// Mean squared error between an ensemble prediction vector and a true
/// CATE vector on the same draws.
#[pyfunction]
fn empirical_regret(model_preds: Vec<f64>, true_cate: Vec<f64>) -> PyResult<f64> {
    cate_forge::empirical_regret(&Array1::from(model_preds), &Array1::from(true_cate))
        .map_err(to_py_err)
}

/// One oracle-mode benchmark replication: simulates the chosen setting,
/// solves the minimax-regret QP against the true site CATE functions, and
/// reports weights and regrets.
#[pyfunction]
#[pyo3(signature = (setting, n_sites, seed, n_target = 2000))]
fn simulate_oracle_replication<'py>(
    py: Python<'py>,
    setting: &str,
    n_sites: usize,
    seed: u64,
    n_target: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let setting = match setting {
        "A" | "a" => Setting::A,
        "B" | "b" => Setting::B,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown setting {other:?}; use 'A' or 'B'"
            )))
        }
    };
    let mut config = DgpConfig::new(setting, n_sites, seed);
    config.n_target = n_target;
    let report = cate_forge::run_replication(
        &config,
        &[Method::Regret],
        &SiteModelSpec::Oracle,
        0,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new_bound(py);
    out.set_item("weights", report.methods[0].weights.clone())?;
    out.set_item("per_site_regret", report.methods[0].per_site_regret.clone())?;
    out.set_item("worst_case_regret", report.methods[0].worst_case_regret)?;
    out.set_item("site_rmse", report.site_rmse.clone())?;
    Ok(out)
}

#[pymodule]
fn _cate_forge(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(project_to_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(regret_weights, m)?)?;
    m.add_function(wrap_pyfunction!(relative_risk_weights, m)?)?;
    m.add_function(wrap_pyfunction!(risk_2site_weight, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_regret, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_oracle_replication, m)?)?;
    Ok(())
}
