//! Site-specific CATE estimation: deterministic base regressors, propensity
//! models, and the T-, X-, and DR-meta-learners.
//!
//! All fits are deterministic functions of the training data and the
//! configuration; refitting yields bit-identical predictors.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};

use crate::error::{CateForgeError, Result};
use crate::linalg;
use crate::rng;

/// Observations from one source site.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub outcomes: Array1<f64>,
    pub treatments: Vec<u8>,
    pub covariates: Array2<f64>,
    pub site_id: String,
}

impl SiteDataset {
    pub fn new(
        outcomes: Array1<f64>,
        treatments: Vec<u8>,
        covariates: Array2<f64>,
        site_id: impl Into<String>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n < 2 {
            return Err(CateForgeError::invalid("site needs at least 2 observations"));
        }
        if treatments.len() != n || covariates.nrows() != n {
            return Err(CateForgeError::invalid("outcome/treatment/covariate lengths differ"));
        }
        if treatments.iter().any(|a| *a > 1) {
            return Err(CateForgeError::invalid("treatments must be 0 or 1"));
        }
        if outcomes.iter().any(|y| !y.is_finite())
            || covariates.iter().any(|x| !x.is_finite())
        {
            return Err(CateForgeError::invalid("non-finite entries in site data"));
        }
        Ok(SiteDataset {
            outcomes,
            treatments,
            covariates,
            site_id: site_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    fn arm_indices(&self, arm: u8) -> Vec<usize> {
        self.treatments
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == arm)
            .map(|(i, _)| i)
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        let x = self.covariates.select(Axis(0), idx);
        let y = Array1::from_iter(idx.iter().map(|&i| self.outcomes[i]));
        (x, y)
    }

    /// Concatenates several sites into one dataset (ascending site order).
    pub fn concat(sites: &[SiteDataset]) -> Result<SiteDataset> {
        if sites.is_empty() {
            return Err(CateForgeError::invalid("no sites to pool"));
        }
        let d = sites[0].dim();
        if sites.iter().any(|s| s.dim() != d) {
            return Err(CateForgeError::invalid("sites have incompatible covariate dimensions"));
        }
        let n: usize = sites.iter().map(|s| s.len()).sum();
        let mut outcomes = Array1::zeros(n);
        let mut treatments = Vec::with_capacity(n);
        let mut covariates = Array2::zeros((n, d));
        let mut row = 0;
        for site in sites {
            for i in 0..site.len() {
                outcomes[row] = site.outcomes[i];
                treatments.push(site.treatments[i]);
                covariates.row_mut(row).assign(&site.covariates.row(i));
                row += 1;
            }
        }
        SiteDataset::new(outcomes, treatments, covariates, "pooled")
    }
}

/// A fitted model mapping a covariate vector to a real prediction.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

pub type SharedPredictor = Arc<dyn Predictor>;

/// Evaluates a predictor on every row of a covariate matrix.
pub fn predict_rows(predictor: &dyn Predictor, x: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(x.rows().into_iter().map(|row| {
        predictor.predict(row.as_slice().expect("contiguous row"))
    }))
}

/// Base regressor configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseConfig {
    /// Ridge regression on degree-2 polynomial features (intercept, linear,
    /// squares, pairwise interactions). The intercept is not penalized.
    RidgePoly { lambda: f64 },
    /// k-nearest-neighbor mean with Euclidean distance; ties broken by the
    /// lowest training row index. `k` is clipped to the sample size.
    Knn { k: usize },
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig::RidgePoly { lambda: 1e-3 }
    }
}

impl BaseConfig {
    pub fn default_knn() -> Self {
        BaseConfig::Knn { k: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropensityConfig {
    KnownConstant(f64),
    Logistic,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig::KnownConstant(0.5)
    }
}

const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

fn poly_features(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut f = Vec::with_capacity(1 + 2 * d + d * (d - 1) / 2);
    f.push(1.0);
    f.extend_from_slice(x);
    for i in 0..d {
        f.push(x[i] * x[i]);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            f.push(x[i] * x[j]);
        }
    }
    f
}

struct RidgePolyModel {
    coef: Array1<f64>,
}

impl Predictor for RidgePolyModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let f = poly_features(x);
        f.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }
}

struct KnnModel {
    x: Array2<f64>,
    y: Array1<f64>,
    k: usize,
}

impl Predictor for KnnModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let n = self.x.nrows();
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let row = self.x.row(i);
                let d2: f64 = row
                    .iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let k = self.k.min(n);
        dist[..k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / k as f64
    }
}

struct ConstantModel(f64);

impl Predictor for ConstantModel {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

struct LogisticModel {
    coef: Array1<f64>,
}

impl Predictor for LogisticModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = self.coef[0];
        for (i, xi) in x.iter().enumerate() {
            z += self.coef[i + 1] * xi;
        }
        let p = 1.0 / (1.0 + (-z).exp());
        p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
    }
}

/// Fits a base regressor of `y` on the rows of `x`.
pub fn fit_base_regressor(x: &Array2<f64>, y: &Array1<f64>, config: BaseConfig) -> Result<SharedPredictor> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(CateForgeError::invalid("regressor needs matching nonempty x and y"));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(CateForgeError::invalid("non-finite training data"));
    }
    match config {
        BaseConfig::RidgePoly { lambda } => {
            let p = poly_features(x.row(0).as_slice().unwrap()).len();
            let mut features = Array2::zeros((n, p));
            for i in 0..n {
                let f = poly_features(x.row(i).as_slice().unwrap());
                features.row_mut(i).assign(&Array1::from(f));
            }
            let ft = features.t();
            let mut gram = ft.dot(&features);
            let rhs = ft.dot(y);
            // Penalize everything except the intercept; the floor keeps the
            // normal equations solvable for rank-deficient designs.
            let eff = lambda.max(1e-12);
            for i in 1..p {
                gram[[i, i]] += eff;
            }
            gram[[0, 0]] += 1e-12;
            let coef = linalg::solve_spd(&gram, &rhs, 0.0)?;
            Ok(Arc::new(RidgePolyModel { coef }))
        }
        BaseConfig::Knn { k } => {
            if k == 0 {
                return Err(CateForgeError::invalid("knn needs k >= 1"));
            }
            Ok(Arc::new(KnnModel {
                x: x.clone(),
                y: y.clone(),
                k,
            }))
        }
    }
}

/// Fits a propensity model P(A=1 | X). With `KnownConstant` the data are
/// ignored; otherwise a logistic regression is fit by Newton-Raphson and
/// predictions are clipped to [0.01, 0.99].
pub fn fit_propensity(x: &Array2<f64>, a: &[u8], config: PropensityConfig) -> Result<SharedPredictor> {
    match config {
        PropensityConfig::KnownConstant(p) => {
            if !(0.0..=1.0).contains(&p) || p <= 0.0 || p >= 1.0 {
                return Err(CateForgeError::invalid("known propensity must lie in (0, 1)"));
            }
            Ok(Arc::new(ConstantModel(p)))
        }
        PropensityConfig::Logistic => {
            let n = x.nrows();
            if a.len() != n || n == 0 {
                return Err(CateForgeError::invalid("propensity needs matching nonempty x and a"));
            }
            if !a.iter().any(|v| *v == 1) || !a.iter().any(|v| *v == 0) {
                return Err(CateForgeError::invalid("both treatment classes must be present"));
            }
            let d = x.ncols();
            let p = d + 1;
            let mut coef = Array1::<f64>::zeros(p);
            let design = {
                let mut m = Array2::ones((n, p));
                for i in 0..n {
                    for j in 0..d {
                        m[[i, j + 1]] = x[[i, j]];
                    }
                }
                m
            };
            let target = Array1::from_iter(a.iter().map(|&v| v as f64));
            let max_iter = 100;
            for iter in 1..=max_iter {
                let z = design.dot(&coef);
                let probs = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                let grad = design.t().dot(&(&target - &probs));
                let gnorm = grad.dot(&grad).sqrt();
                if gnorm <= 1e-8 {
                    return Ok(Arc::new(LogisticModel { coef }));
                }
                let w = probs.mapv(|p| (p * (1.0 - p)).max(1e-10));
                let mut hess = Array2::<f64>::zeros((p, p));
                for i in 0..n {
                    let row = design.row(i);
                    for j in 0..p {
                        for k in 0..p {
                            hess[[j, k]] += w[i] * row[j] * row[k];
                        }
                    }
                }
                let delta = linalg::solve_spd(&hess, &grad, 1e-8)?;
                // Cap the Newton step so separable data saturate instead of
                // overflowing.
                let dnorm = delta.dot(&delta).sqrt();
                let capped = if dnorm > 10.0 { delta * (10.0 / dnorm) } else { delta };
                coef = &coef + &capped;
                if iter == max_iter {
                    // Saturated fits stop making gradient progress once
                    // predictions hit the clipping bounds; accept them.
                    let probs_clipped = design
                        .dot(&coef)
                        .mapv(|v| (1.0 / (1.0 + (-v).exp())).clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1));
                    let resid = design.t().dot(&(&target - &probs_clipped));
                    if resid.dot(&resid).sqrt() <= 1e-6 * n as f64 {
                        return Ok(Arc::new(LogisticModel { coef }));
                    }
                    return Err(CateForgeError::NonConvergence { iterations: iter });
                }
            }
            unreachable!()
        }
    }
}

struct DifferenceModel {
    mu1: SharedPredictor,
    mu0: SharedPredictor,
}

impl Predictor for DifferenceModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.mu1.predict(x) - self.mu0.predict(x)
    }
}

fn fit_arm_regressions(
    data: &SiteDataset,
    base: BaseConfig,
) -> Result<(SharedPredictor, SharedPredictor)> {
    let treated = data.arm_indices(1);
    let control = data.arm_indices(0);
    if treated.len() < 2 || control.len() < 2 {
        return Err(CateForgeError::invalid(
            "both treatment arms need at least 2 observations",
        ));
    }
    let (x1, y1) = data.subset(&treated);
    let (x0, y0) = data.subset(&control);
    let mu1 = fit_base_regressor(&x1, &y1, base)?;
    let mu0 = fit_base_regressor(&x0, &y0, base)?;
    Ok((mu1, mu0))
}

/// T-learner: arm-wise outcome regressions, CATE = mu1 - mu0.
pub fn fit_t_learner(data: &SiteDataset, base: BaseConfig) -> Result<SharedPredictor> {
    let (mu1, mu0) = fit_arm_regressions(data, base)?;
    Ok(Arc::new(DifferenceModel { mu1, mu0 }))
}

struct XLearnerModel {
    tau1: SharedPredictor,
    tau0: SharedPredictor,
    propensity: SharedPredictor,
}

impl Predictor for XLearnerModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let g = self.propensity.predict(x);
        g * self.tau0.predict(x) + (1.0 - g) * self.tau1.predict(x)
    }
}

/// X-learner: arm regressions, imputed individual effects, second-stage
/// effect regressions blended by the propensity.
pub fn fit_x_learner(
    data: &SiteDataset,
    base: BaseConfig,
    propensity: PropensityConfig,
) -> Result<SharedPredictor> {
    let (mu1, mu0) = fit_arm_regressions(data, base)?;
    let treated = data.arm_indices(1);
    let control = data.arm_indices(0);
    let (x1, y1) = data.subset(&treated);
    let (x0, y0) = data.subset(&control);
    let d1 = &y1 - &predict_rows(mu0.as_ref(), &x1);
    let d0 = &predict_rows(mu1.as_ref(), &x0) - &y0;
    let tau1 = fit_base_regressor(&x1, &d1, base)?;
    let tau0 = fit_base_regressor(&x0, &d0, base)?;
    let g = fit_propensity(&data.covariates, &data.treatments, propensity)?;
    Ok(Arc::new(XLearnerModel {
        tau1,
        tau0,
        propensity: g,
    }))
}

/// Doubly robust pseudo-outcome:
/// `(a - pi) / (pi (1 - pi)) * (y - mu_a) + mu1 - mu0`.
pub fn dr_pseudo_outcome(a: u8, y: f64, pi: f64, mu1: f64, mu0: f64) -> f64 {
    let mu_a = if a == 1 { mu1 } else { mu0 };
    (a as f64 - pi) / (pi * (1.0 - pi)) * (y - mu_a) + mu1 - mu0
}

fn crossfit_folds(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::substream(seed, &[rng::STREAM_CROSSFIT]);
    let order = rng::shuffled_indices(&mut rng, n);
    let mut out = vec![Vec::new(); folds];
    for (pos, idx) in order.into_iter().enumerate() {
        out[pos % folds].push(idx);
    }
    out
}

fn folds_retain_arms(data: &SiteDataset, folds: &[Vec<usize>]) -> bool {
    folds.iter().all(|fold| {
        let mut t = false;
        let mut c = false;
        for &i in fold {
            if data.treatments[i] == 1 {
                t = true;
            } else {
                c = true;
            }
        }
        t && c && fold.len() >= 4
    })
}

/// DR-learner with cross-fitted nuisances: the split is a deterministic
/// index partition after a seeded shuffle; if a fold misses an arm the
/// shuffle is retried once with an incremented seed.
pub fn fit_dr_learner(
    data: &SiteDataset,
    base: BaseConfig,
    propensity: PropensityConfig,
    folds: usize,
    seed: u64,
) -> Result<SharedPredictor> {
    if folds < 2 {
        return Err(CateForgeError::invalid("cross-fitting needs folds >= 2"));
    }
    let n = data.len();
    let mut partition = crossfit_folds(n, folds, seed);
    if !folds_retain_arms(data, &partition) {
        partition = crossfit_folds(n, folds, seed.wrapping_add(1));
        if !folds_retain_arms(data, &partition) {
            return Err(CateForgeError::DegenerateInput(
                "cross-fitting folds could not retain both treatment arms".to_string(),
            ));
        }
    }

    let mut pseudo = Array1::<f64>::zeros(n);
    for fold in &partition {
        let mut complement: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
        complement.sort_unstable();
        let (xc, _) = data.subset(&complement);
        let treatments_c: Vec<u8> = complement.iter().map(|&i| data.treatments[i]).collect();
        let sub = SiteDataset::new(
            Array1::from_iter(complement.iter().map(|&i| data.outcomes[i])),
            treatments_c.clone(),
            xc.clone(),
            data.site_id.clone(),
        )?;
        let (mu1, mu0) = fit_arm_regressions(&sub, base)?;
        let pi_model = fit_propensity(&xc, &treatments_c, propensity)?;
        for &i in fold {
            let x = data.covariates.row(i);
            let xs = x.as_slice().unwrap();
            let pi = pi_model
                .predict(xs)
                .clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
            pseudo[i] = dr_pseudo_outcome(
                data.treatments[i],
                data.outcomes[i],
                pi,
                mu1.predict(xs),
                mu0.predict(xs),
            );
        }
    }
    fit_base_regressor(&data.covariates, &pseudo, base)
}

/// Which meta-learner to use for a site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaLearnerKind {
    TLearner,
    XLearner,
    DrLearner { folds: usize },
}

/// Full site-learner configuration.
#[derive(Debug, Clone, Copy)]
pub struct LearnerConfig {
    pub meta: MetaLearnerKind,
    pub base: BaseConfig,
    pub propensity: PropensityConfig,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            meta: MetaLearnerKind::TLearner,
            base: BaseConfig::default(),
            propensity: PropensityConfig::default(),
            seed: 0,
        }
    }
}

/// Fits the configured meta-learner on one site.
pub fn fit_cate_learner(data: &SiteDataset, config: &LearnerConfig) -> Result<SharedPredictor> {
    match config.meta {
        MetaLearnerKind::TLearner => fit_t_learner(data, config.base),
        MetaLearnerKind::XLearner => fit_x_learner(data, config.base, config.propensity),
        MetaLearnerKind::DrLearner { folds } => {
            fit_dr_learner(data, config.base, config.propensity, folds, config.seed)
        }
    }
}

/// Wraps a plain function as a predictor (oracle site models in tests and
/// simulations).
pub struct FnPredictor<F: Fn(&[f64]) -> f64 + Send + Sync>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Predictor for FnPredictor<F> {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}
