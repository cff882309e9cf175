//! Builds the QP data from site predictions on the target covariates and
//! produces the ensemble CATE models: minimax-regret, relative-risk,
//! two-site minimax-risk, and pooled.

use ndarray::{Array1, Array2};

use crate::error::{CateForgeError, Result};
use crate::learners::{self, LearnerConfig, SharedPredictor, SiteDataset};
use crate::linalg;
use crate::qp::{self, GammaSystem, PolytopeSpec, QpOptions, WeightSolution};

/// Predicted treatment effects of every site model on the shared target
/// covariates; column `s` is site `s`. This is the only object sites need
/// to exchange.
#[derive(Debug, Clone)]
pub struct CatePredictionMatrix {
    pub values: Array2<f64>,
    pub site_ids: Vec<String>,
}

impl CatePredictionMatrix {
    pub fn new(values: Array2<f64>, site_ids: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(CateForgeError::invalid("prediction matrix must be nonempty"));
        }
        if site_ids.len() != values.ncols() {
            return Err(CateForgeError::invalid("site id count does not match columns"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CateForgeError::invalid("prediction matrix has non-finite entries"));
        }
        Ok(CatePredictionMatrix { values, site_ids })
    }

    /// Builds the matrix by evaluating site predictors on the target rows.
    pub fn from_predictors(
        predictors: &[SharedPredictor],
        site_ids: Vec<String>,
        target: &Array2<f64>,
    ) -> Result<Self> {
        let n = target.nrows();
        let s = predictors.len();
        let mut values = Array2::zeros((n, s));
        for (j, p) in predictors.iter().enumerate() {
            let col = learners::predict_rows(p.as_ref(), target);
            values.column_mut(j).assign(&col);
        }
        CatePredictionMatrix::new(values, site_ids)
    }

    pub fn n_target(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.values.ncols()
    }
}

/// Which aggregation produced an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Regret,
    RelativeRisk,
    Risk2Site,
    Pooled,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Regret => "regret",
            MethodTag::RelativeRisk => "relative_risk",
            MethodTag::Risk2Site => "risk_2site",
            MethodTag::Pooled => "pooled",
        }
    }
}

/// Weighted combination of site predictors; the deliverable model.
pub struct EnsembleCateModel {
    pub weights: Array1<f64>,
    pub site_predictors: Vec<SharedPredictor>,
    pub method_tag: MethodTag,
}

impl EnsembleCateModel {
    /// Prediction at `x`: the weighted sum over sites in ascending site
    /// index, so the summation order is fixed.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.site_predictors
            .iter()
            .enumerate()
            .map(|(s, p)| self.weights[s] * p.predict(x))
            .sum()
    }

    pub fn predict_rows(&self, target: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(
            target
                .rows()
                .into_iter()
                .map(|row| self.predict(row.as_slice().expect("contiguous row"))),
        )
    }

    /// Ensemble predictions as the weighted combination of precomputed
    /// prediction columns (same fixed ascending-index order).
    pub fn combine_columns(weights: &Array1<f64>, preds: &CatePredictionMatrix) -> Array1<f64> {
        let n = preds.n_target();
        let mut out = Array1::zeros(n);
        for s in 0..preds.n_sites() {
            let col = preds.values.column(s);
            for i in 0..n {
                out[i] += weights[s] * col[i];
            }
        }
        out
    }
}

/// Solver certificates and conditioning information for a fitted ensemble.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub lambda_min: f64,
    pub kkt_residual: f64,
    pub worst_case_regret: f64,
    pub per_site_regret: Array1<f64>,
    pub converged: bool,
}

/// Empirical second-moment matrix of the site predictions:
/// `Gamma_hat = V'V / n_Q` accumulated in ascending row order.
pub fn estimate_gamma(preds: &CatePredictionMatrix) -> Result<GammaSystem> {
    let n = preds.n_target();
    let s = preds.n_sites();
    let v = &preds.values;
    let mut gamma = Array2::zeros((s, s));
    for k in 0..s {
        for l in k..s {
            let mut acc = 0.0;
            for i in 0..n {
                acc += v[[i, k]] * v[[i, l]];
            }
            let val = acc / n as f64;
            gamma[[k, l]] = val;
            gamma[[l, k]] = val;
        }
    }
    GammaSystem::new(gamma)
}

fn build_diagnostics(system: &GammaSystem, solution: &WeightSolution) -> Diagnostics {
    Diagnostics {
        lambda_min: linalg::lambda_min(system.gamma(), 200),
        kkt_residual: solution.kkt_residual,
        worst_case_regret: solution.worst_case_regret,
        per_site_regret: system.per_site_regret(&solution.weights),
        converged: solution.converged,
    }
}

fn check_alignment(preds: &CatePredictionMatrix, predictors: &[SharedPredictor]) -> Result<()> {
    if predictors.len() != preds.n_sites() {
        return Err(CateForgeError::invalid(
            "predictor list length does not match prediction columns",
        ));
    }
    Ok(())
}

/// Minimax-regret ensemble from the prediction matrix.
pub fn fit_regret_ensemble(
    preds: &CatePredictionMatrix,
    predictors: Vec<SharedPredictor>,
    poly: Option<&PolytopeSpec>,
    opts: &QpOptions,
) -> Result<(EnsembleCateModel, Diagnostics)> {
    check_alignment(preds, &predictors)?;
    let system = estimate_gamma(preds)?;
    let solution = match poly {
        None => qp::solve_regret_qp(&system, opts)?,
        Some(p) => qp::solve_regret_qp_polytope(&system, p, opts)?,
    };
    let diagnostics = build_diagnostics(&system, &solution);
    Ok((
        EnsembleCateModel {
            weights: solution.weights,
            site_predictors: predictors,
            method_tag: MethodTag::Regret,
        },
        diagnostics,
    ))
}

/// Relative-risk ensemble against an explicit baseline prediction vector
/// (an all-zeros vector encodes the default zero baseline).
pub fn fit_relative_risk_ensemble(
    preds: &CatePredictionMatrix,
    baseline_preds: &Array1<f64>,
    predictors: Vec<SharedPredictor>,
    poly: Option<&PolytopeSpec>,
    opts: &QpOptions,
) -> Result<(EnsembleCateModel, Diagnostics)> {
    check_alignment(preds, &predictors)?;
    let n = preds.n_target();
    if baseline_preds.len() != n {
        return Err(CateForgeError::invalid(
            "baseline prediction length does not match target rows",
        ));
    }
    if baseline_preds.iter().any(|v| !v.is_finite()) {
        return Err(CateForgeError::invalid("baseline predictions are non-finite"));
    }
    let system = estimate_gamma(preds)?;
    // b_s = mean_i tau_s(X_i) * f_base(X_i).
    let s = preds.n_sites();
    let mut b = Array1::zeros(s);
    for j in 0..s {
        let mut acc = 0.0;
        for i in 0..n {
            acc += preds.values[[i, j]] * baseline_preds[i];
        }
        b[j] = acc / n as f64;
    }
    let solution = qp::solve_relative_risk_qp(&system, &b, poly, opts)?;
    let diagnostics = build_diagnostics(&system, &solution);
    Ok((
        EnsembleCateModel {
            weights: solution.weights,
            site_predictors: predictors,
            method_tag: MethodTag::RelativeRisk,
        },
        diagnostics,
    ))
}

/// Closed-form two-site minimax-risk weight:
/// `q1 = clip(1/2 + (s1 - s2) / (2 dist_sq), 0, 1)`.
pub fn risk_2site_weight(sigma1_sq: f64, sigma2_sq: f64, dist_sq: f64) -> Result<f64> {
    if sigma1_sq < 0.0 || sigma2_sq < 0.0 || !sigma1_sq.is_finite() || !sigma2_sq.is_finite() {
        return Err(CateForgeError::invalid("noise variances must be finite and nonnegative"));
    }
    if dist_sq <= 0.0 {
        return Err(CateForgeError::DegenerateInput(
            "two-site risk weight needs distinct site CATEs (positive distance)".to_string(),
        ));
    }
    Ok((0.5 + (sigma1_sq - sigma2_sq) / (2.0 * dist_sq)).clamp(0.0, 1.0))
}

/// Two-site minimax-risk ensemble; noise variances are caller-supplied
/// constants, the squared distance between the site CATEs is estimated from
/// the prediction columns.
pub fn fit_risk_2site_ensemble(
    preds: &CatePredictionMatrix,
    sigma1_sq: f64,
    sigma2_sq: f64,
    predictors: Vec<SharedPredictor>,
) -> Result<EnsembleCateModel> {
    check_alignment(preds, &predictors)?;
    if preds.n_sites() != 2 {
        return Err(CateForgeError::Unsupported(
            "two-site minimax-risk is only defined for S = 2".to_string(),
        ));
    }
    let n = preds.n_target();
    let mut dist_sq = 0.0;
    for i in 0..n {
        let diff = preds.values[[i, 0]] - preds.values[[i, 1]];
        dist_sq += diff * diff;
    }
    dist_sq /= n as f64;
    let q1 = risk_2site_weight(sigma1_sq, sigma2_sq, dist_sq)?;
    Ok(EnsembleCateModel {
        weights: Array1::from(vec![q1, 1.0 - q1]),
        site_predictors: predictors,
        method_tag: MethodTag::Risk2Site,
    })
}

/// Pooled baseline: a single learner trained on the concatenated data,
/// wrapped as a one-site ensemble.
pub fn fit_pooled(sites: &[SiteDataset], learner_config: &LearnerConfig) -> Result<EnsembleCateModel> {
    let pooled = SiteDataset::concat(sites)?;
    let predictor = learners::fit_cate_learner(&pooled, learner_config)?;
    Ok(EnsembleCateModel {
        weights: Array1::from(vec![1.0]),
        site_predictors: vec![predictor],
        method_tag: MethodTag::Pooled,
    })
}

/// Mean squared difference between a model's predictions and a target CATE
/// on the target draws.
pub fn empirical_regret(model_preds: &Array1<f64>, true_cate: &Array1<f64>) -> Result<f64> {
    if model_preds.len() != true_cate.len() {
        return Err(CateForgeError::invalid("prediction vectors differ in length"));
    }
    if model_preds.is_empty() {
        return Err(CateForgeError::invalid("empty prediction vectors"));
    }
    if model_preds.iter().chain(true_cate.iter()).any(|v| !v.is_finite()) {
        return Err(CateForgeError::invalid("non-finite entries in regret inputs"));
    }
    let n = model_preds.len();
    let mut acc = 0.0;
    for i in 0..n {
        let diff = true_cate[i] - model_preds[i];
        acc += diff * diff;
    }
    Ok(acc / n as f64)
}

/// Warns (returns false) when a site's covariate bounding box fails to
/// cover at least 99% of the target draws; a crude covariate-overlap
/// screen.
pub fn covariate_overlap_ok(site: &SiteDataset, target: &Array2<f64>) -> bool {
    let d = site.dim();
    if target.ncols() != d {
        return false;
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in site.covariates.rows() {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let n = target.nrows();
    let covered = target
        .rows()
        .into_iter()
        .filter(|row| (0..d).all(|j| row[j] >= lo[j] && row[j] <= hi[j]))
        .count();
    covered as f64 / n as f64 >= 0.99
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::FnPredictor;
    use crate::rng::{standard_normal, substream};
    use ndarray::array;
    use std::sync::Arc;

    fn oracle(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> SharedPredictor {
        Arc::new(FnPredictor(f))
    }

    #[test]
    fn gamma_of_small_matrix_by_hand() {
        let preds = CatePredictionMatrix::new(
            array![[1.0, 2.0], [1.0, 2.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let system = estimate_gamma(&preds).unwrap();
        assert_eq!(system.gamma()[[0, 0]], 1.0);
        assert_eq!(system.gamma()[[0, 1]], 2.0);
        assert_eq!(system.gamma()[[1, 1]], 4.0);
        assert_eq!(system.d()[0], 1.0);
        assert_eq!(system.d()[1], 4.0);
    }

    #[test]
    fn zero_column_zeroes_gamma_row() {
        let preds = CatePredictionMatrix::new(
            array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let system = estimate_gamma(&preds).unwrap();
        assert_eq!(system.gamma()[[0, 1]], 0.0);
        assert_eq!(system.gamma()[[1, 1]], 0.0);
    }

    #[test]
    fn gamma_matches_double_loop_reference() {
        let mut rng = substream(11, &[3]);
        let v = Array2::from_shape_fn((1000, 3), |_| standard_normal(&mut rng));
        let preds = CatePredictionMatrix::new(
            v.clone(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let system = estimate_gamma(&preds).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                let mut acc = 0.0;
                for i in 0..1000 {
                    acc += v[[i, k]] * v[[i, l]];
                }
                assert!((system.gamma()[[k, l]] - acc / 1000.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_site_regret_ensemble_is_identity() {
        let preds =
            CatePredictionMatrix::new(array![[1.0], [2.0], [3.0]], vec!["a".into()]).unwrap();
        let (model, diag) = fit_regret_ensemble(
            &preds,
            vec![oracle(|x| x[0])],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        assert_eq!(model.weights[0], 1.0);
        assert!(diag.worst_case_regret.abs() < 1e-12);
    }

    #[test]
    fn duplicated_sites_flag_degenerate_gamma() {
        let mut rng = substream(13, &[5]);
        let col = Array1::from_shape_fn(200, |_| standard_normal(&mut rng));
        let mut v = Array2::zeros((200, 2));
        v.column_mut(0).assign(&col);
        v.column_mut(1).assign(&col);
        let preds = CatePredictionMatrix::new(v, vec!["a".into(), "b".into()]).unwrap();
        let (model, diag) = fit_regret_ensemble(
            &preds,
            vec![oracle(|x| x[0]), oracle(|x| x[0])],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        assert!(diag.lambda_min.abs() < 1e-8);
        assert!((model.weights.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn midpoint_weights_from_monte_carlo_target() {
        // tau1 = 0, tau2 = 2 h with h(x) = x1 1(x1 > 0): weights near 1/2.
        let mut rng = substream(17, &[9]);
        let n = 10_000;
        let mut v = Array2::zeros((n, 2));
        for i in 0..n {
            let x = standard_normal(&mut rng);
            let h = if x > 0.0 { x } else { 0.0 };
            v[[i, 0]] = 0.0;
            v[[i, 1]] = 2.0 * h;
        }
        let preds = CatePredictionMatrix::new(v, vec!["a".into(), "b".into()]).unwrap();
        let (model, _) = fit_regret_ensemble(
            &preds,
            vec![oracle(|_| 0.0), oracle(|_| 0.0)],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        assert!((model.weights[0] - 0.5).abs() < 0.02, "{:?}", model.weights);
    }

    #[test]
    fn relative_risk_reduces_to_in_hull_baseline() {
        let mut rng = substream(19, &[1]);
        let n = 500;
        let v = Array2::from_shape_fn((n, 3), |_| standard_normal(&mut rng));
        let preds = CatePredictionMatrix::new(
            v.clone(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let baseline = v.column(2).to_owned();
        let (model, _) = fit_relative_risk_ensemble(
            &preds,
            &baseline,
            vec![oracle(|_| 0.0), oracle(|_| 0.0), oracle(|_| 0.0)],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        assert!(model.weights[2] > 0.999, "{:?}", model.weights);
        assert_eq!(model.method_tag, MethodTag::RelativeRisk);
    }

    #[test]
    fn relative_risk_baseline_outside_hull_matches_grid_oracle() {
        let mut rng = substream(23, &[1]);
        let n = 400;
        let v = Array2::from_shape_fn((n, 3), |_| standard_normal(&mut rng));
        let baseline = v.column(0).mapv(|x| 10.0 * x);
        let preds = CatePredictionMatrix::new(
            v.clone(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let (model, _) = fit_relative_risk_ensemble(
            &preds,
            &baseline,
            vec![oracle(|_| 0.0), oracle(|_| 0.0), oracle(|_| 0.0)],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        // Compare empirical L2 distance to baseline against the grid oracle.
        let system = estimate_gamma(&preds).unwrap();
        let mut b = Array1::zeros(3);
        for j in 0..3 {
            for i in 0..n {
                b[j] += v[[i, j]] * baseline[i];
            }
            b[j] /= n as f64;
        }
        let c = b.mapv(|x| -2.0 * x);
        let (_, oracle_obj) =
            crate::oracle::minimize_qp_on_simplex_grid(system.gamma(), &c, 1e-3);
        let q = &model.weights;
        let obj = q.dot(&system.gamma().dot(q)) - 2.0 * q.dot(&b);
        assert!(obj <= oracle_obj + 1e-5, "{obj} vs {oracle_obj}");
    }

    #[test]
    fn risk_2site_formula_values() {
        // Equal variances: exact midpoint.
        assert_eq!(risk_2site_weight(1.0, 1.0, 2.0).unwrap(), 0.5);
        // sigma1 - sigma2 = 2 dist: clipped at 1.
        assert_eq!(risk_2site_weight(4.0, 0.0, 1.0).unwrap(), 1.0);
        // Worked value: 0.5 + 1/(2*2) = 0.75.
        assert!((risk_2site_weight(1.0, 0.0, 2.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn risk_2site_rejects_wrong_arity_and_degenerate_distance() {
        let preds = CatePredictionMatrix::new(
            array![[1.0, 2.0, 3.0]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let err = fit_risk_2site_ensemble(
            &preds,
            1.0,
            1.0,
            vec![oracle(|_| 0.0), oracle(|_| 0.0), oracle(|_| 0.0)],
        );
        assert!(matches!(err, Err(CateForgeError::Unsupported(_))));

        let same = CatePredictionMatrix::new(
            array![[1.0, 1.0], [2.0, 2.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let err = fit_risk_2site_ensemble(&same, 1.0, 1.0, vec![oracle(|_| 0.0), oracle(|_| 0.0)]);
        assert!(matches!(err, Err(CateForgeError::DegenerateInput(_))));
    }

    #[test]
    fn empirical_regret_basic_values() {
        let a = array![1.0, 2.0, 3.0];
        assert_eq!(empirical_regret(&a, &a).unwrap(), 0.0);
        assert_eq!(
            empirical_regret(&array![0.0, 0.0], &array![1.0, 1.0]).unwrap(),
            1.0
        );
        let x = array![0.3, -1.2, 0.7, 2.0, -0.5];
        let y = array![0.1, 0.4, -0.7, 1.0, 0.0];
        let hand = ((0.3f64 - 0.1).powi(2)
            + (-1.2f64 - 0.4).powi(2)
            + (0.7f64 + 0.7).powi(2)
            + (2.0f64 - 1.0).powi(2)
            + (-0.5f64 - 0.0).powi(2))
            / 5.0;
        assert!((empirical_regret(&x, &y).unwrap() - hand).abs() < 1e-15);
        assert!(empirical_regret(&a, &array![1.0]).is_err());
    }

    #[test]
    fn identical_columns_make_all_methods_agree() {
        // Affine consistency: every site predicts the same column.
        let mut rng = substream(29, &[2]);
        let col = Array1::from_shape_fn(300, |_| standard_normal(&mut rng));
        let mut v = Array2::zeros((300, 3));
        for j in 0..3 {
            v.column_mut(j).assign(&col);
        }
        let preds = CatePredictionMatrix::new(
            v,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let (model, _) = fit_regret_ensemble(
            &preds,
            vec![oracle(|_| 0.0), oracle(|_| 0.0), oracle(|_| 0.0)],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        let combined = EnsembleCateModel::combine_columns(&model.weights, &preds);
        assert!((&combined - &col).iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn risk_2site_equal_noise_matches_regret_on_two_sites() {
        let mut rng = substream(31, &[4]);
        let n = 2000;
        let mut v = Array2::zeros((n, 2));
        for i in 0..n {
            let x = standard_normal(&mut rng);
            let h = if x > 0.0 { x } else { 0.0 };
            v[[i, 0]] = 0.5 * h;
            v[[i, 1]] = 2.0 * h;
        }
        let preds = CatePredictionMatrix::new(v, vec!["a".into(), "b".into()]).unwrap();
        let (regret_model, _) = fit_regret_ensemble(
            &preds,
            vec![oracle(|_| 0.0), oracle(|_| 0.0)],
            None,
            &QpOptions::default(),
        )
        .unwrap();
        let risk_model = fit_risk_2site_ensemble(
            &preds,
            1.0,
            1.0,
            vec![oracle(|_| 0.0), oracle(|_| 0.0)],
        )
        .unwrap();
        assert!(
            (regret_model.weights[0] - risk_model.weights[0]).abs() < 1e-6,
            "{:?} vs {:?}",
            regret_model.weights,
            risk_model.weights
        );
    }
}
