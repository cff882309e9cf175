//! Simplex- and polytope-constrained quadratic programs that define the
//! ensemble aggregation weights.
//!
//! The generic problem is `min_q q'Gamma q + c'q` over the probability
//! simplex. The minimax-regret weights use `c = -d` (the diagonal of
//! `Gamma`), the relative-risk weights use `c = -2b` for a baseline moment
//! vector `b`. Polytope-restricted variants transform the problem through
//! the vertex matrix `G` and solve over the simplex of vertex weights.

use ndarray::{Array1, Array2};

use crate::error::{CateForgeError, Result};
use crate::linalg;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL_REL: f64 = 1e-8;
const VERTEX_SUM_TOL: f64 = 1e-12;
const CLAMP_TOL: f64 = 1e-12;

/// Second-moment matrix of the site CATE models under the target covariate
/// distribution, together with its diagonal.
#[derive(Debug, Clone)]
pub struct GammaSystem {
    gamma: Array2<f64>,
    d: Array1<f64>,
}

impl GammaSystem {
    /// Validates symmetry and positive semidefiniteness; the linear term `d`
    /// is taken from the diagonal.
    pub fn new(gamma: Array2<f64>) -> Result<Self> {
        let s = gamma.nrows();
        if s == 0 || gamma.ncols() != s {
            return Err(CateForgeError::invalid("gamma must be a nonempty square matrix"));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(CateForgeError::invalid("gamma contains non-finite entries"));
        }
        let asym = linalg::max_asymmetry(&gamma);
        if asym > SYMMETRY_TOL {
            return Err(CateForgeError::invalid(format!(
                "gamma is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let lmax = linalg::lambda_max(&gamma, 200).max(0.0);
        let lmin = linalg::lambda_min(&gamma, 200);
        if lmin < -PSD_TOL_REL * lmax.max(1e-300) && lmin < -1e-12 {
            return Err(CateForgeError::invalid(format!(
                "gamma is not positive semidefinite (lambda_min {lmin:.3e})"
            )));
        }
        let d = gamma.diag().to_owned();
        Ok(GammaSystem { gamma, d })
    }

    pub fn size(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn d(&self) -> &Array1<f64> {
        &self.d
    }

    /// Per-site squared L2 distance between the ensemble with weights `q`
    /// and each site model: `Gamma_ss - 2 (Gamma q)_s + q'Gamma q`.
    pub fn per_site_regret(&self, q: &Array1<f64>) -> Array1<f64> {
        let gq = self.gamma.dot(q);
        let quad = q.dot(&gq);
        Array1::from_shape_fn(self.size(), |s| self.gamma[[s, s]] - 2.0 * gq[s] + quad)
    }
}

/// Convex polytope inside the simplex, given by its vertex list.
#[derive(Debug, Clone)]
pub struct PolytopeSpec {
    vertices: Vec<Array1<f64>>,
}

impl PolytopeSpec {
    pub fn new(vertices: Vec<Array1<f64>>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(CateForgeError::invalid("polytope needs at least one vertex"));
        }
        let dim = vertices[0].len();
        for (i, v) in vertices.iter().enumerate() {
            if v.len() != dim {
                return Err(CateForgeError::invalid("polytope vertices differ in length"));
            }
            if v.iter().any(|x| !x.is_finite() || *x < -VERTEX_SUM_TOL) {
                return Err(CateForgeError::invalid(format!(
                    "vertex {i} has negative or non-finite entries"
                )));
            }
            if (v.sum() - 1.0).abs() > VERTEX_SUM_TOL {
                return Err(CateForgeError::invalid(format!(
                    "vertex {i} does not sum to 1"
                )));
            }
            for w in &vertices[..i] {
                if v.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() <= VERTEX_SUM_TOL) {
                    return Err(CateForgeError::invalid(format!("vertex {i} duplicates an earlier one")));
                }
            }
        }
        Ok(PolytopeSpec { vertices })
    }

    /// Identity polytope: the full simplex of dimension `s`.
    pub fn full_simplex(s: usize) -> Self {
        let vertices = (0..s)
            .map(|i| Array1::from_shape_fn(s, |j| if i == j { 1.0 } else { 0.0 }))
            .collect();
        PolytopeSpec { vertices }
    }

    pub fn vertices(&self) -> &[Array1<f64>] {
        &self.vertices
    }

    /// Vertex matrix `G`, one column per vertex.
    pub fn vertex_matrix(&self) -> Array2<f64> {
        let s = self.vertices[0].len();
        let n = self.vertices.len();
        Array2::from_shape_fn((s, n), |(i, j)| self.vertices[j][i])
    }
}

/// Solver output: simplex weights plus optimality certificates.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    pub weights: Array1<f64>,
    pub objective: f64,
    pub worst_case_regret: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solver knobs. `ridge` adds an explicit Tikhonov term to the quadratic;
/// it defaults to 0 so degenerate systems are solved as posed.
#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-12,
            max_iter: 20_000,
            ridge: 0.0,
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-based, exact).
pub fn project_to_simplex(v: &Array1<f64>) -> Result<Array1<f64>> {
    let s = v.len();
    if s == 0 {
        return Err(CateForgeError::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CateForgeError::invalid("projection input has non-finite entries"));
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.mapv(|x| (x - theta).max(0.0)))
}

/// Minimizes `q'Gamma q + c'q` over the simplex by projected gradient
/// descent with step `1/L`, `L = 2 lambda_max(Gamma)`, uniform start, and
/// Nesterov momentum guarded by a monotone fallback step.
fn minimize_simplex_qp(
    gamma: &Array2<f64>,
    c: &Array1<f64>,
    opts: &QpOptions,
) -> Result<(Array1<f64>, f64, usize, bool)> {
    let s = gamma.nrows();
    if opts.tol <= 0.0 {
        return Err(CateForgeError::invalid("tol must be positive"));
    }
    let mut quad = gamma.clone();
    if opts.ridge != 0.0 {
        for i in 0..s {
            quad[[i, i]] += opts.ridge;
        }
    }
    let objective = |q: &Array1<f64>| q.dot(&quad.dot(q)) + c.dot(q);
    let gradient = |q: &Array1<f64>| 2.0 * quad.dot(q) + c;

    if s == 1 {
        let q = Array1::from_elem(1, 1.0);
        let obj = objective(&q);
        return Ok((q, obj, 0, true));
    }

    let lmax = linalg::lambda_max(&quad, 50).max(0.0);
    let lipschitz = 2.0 * lmax;
    if lipschitz <= 1e-300 {
        // Purely linear objective: the minimum sits on a vertex.
        let best = c
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let q = Array1::from_shape_fn(s, |i| if i == best { 1.0 } else { 0.0 });
        let obj = objective(&q);
        return Ok((q, obj, 0, true));
    }
    let step = 1.0 / lipschitz;

    let mut q = Array1::from_elem(s, 1.0 / s as f64);
    let mut obj = objective(&q);
    let mut y = q.clone();
    let mut momentum = 1.0f64;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut candidate = project_to_simplex(&(&y - &(gradient(&y) * step)))?;
        let mut cand_obj = objective(&candidate);
        if cand_obj > obj {
            // Momentum overshot; restart from the plain descent step, which
            // cannot increase the objective at step 1/L.
            candidate = project_to_simplex(&(&q - &(gradient(&q) * step)))?;
            cand_obj = objective(&candidate);
            momentum = 1.0;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        y = &candidate + &((&candidate - &q) * beta);
        momentum = next_momentum;

        let decrease = obj - cand_obj;
        q = candidate;
        obj = cand_obj;
        if decrease >= 0.0 && decrease < opts.tol {
            // The objective can stall while the iterate is still drifting
            // along a low-curvature face, so certify with the fixed-point
            // residual of the plain projected step before stopping.
            let fixed = project_to_simplex(&(&q - &(gradient(&q) * step)))?;
            let res = (&fixed - &q)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if res <= 1e-10 {
                converged = true;
                break;
            }
        }
    }
    Ok((q, obj, iterations, converged))
}

/// Clamps tiny negative entries to zero and renormalizes to sum 1.
fn clamp_weights(q: &Array1<f64>) -> Array1<f64> {
    let mut w = q.mapv(|x| if x < 0.0 && x >= -CLAMP_TOL { 0.0 } else { x });
    let total = w.sum();
    if total > 0.0 {
        w.mapv_inplace(|x| x / total);
    }
    w
}

/// Numerical violation of the stationarity / complementary-slackness system
/// at `q`, with the worst-case level taken as the maximum per-site regret.
pub fn kkt_residual(system: &GammaSystem, q: &Array1<f64>) -> Result<f64> {
    if q.len() != system.size() {
        return Err(CateForgeError::invalid("weight length does not match system size"));
    }
    if (q.sum() - 1.0).abs() > 1e-6 || q.iter().any(|x| *x < -1e-9) {
        return Err(CateForgeError::invalid("weights are not on the simplex"));
    }
    let regrets = system.per_site_regret(q);
    let worst = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut residual = 0.0f64;
    for s in 0..system.size() {
        let slack = (q[s] * (regrets[s] - worst)).abs() + (regrets[s] - worst).max(0.0);
        residual = residual.max(slack);
    }
    Ok(residual)
}

fn finish_regret_solution(
    system: &GammaSystem,
    q: Array1<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
) -> Result<WeightSolution> {
    let weights = clamp_weights(&q);
    let regrets = system.per_site_regret(&weights);
    let worst = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let residual = kkt_residual(system, &weights)?;
    Ok(WeightSolution {
        weights,
        objective,
        worst_case_regret: worst.max(0.0),
        kkt_residual: residual,
        iterations,
        converged,
    })
}

/// Minimax-regret weights: `argmin q'Gamma q - q'd` over the simplex.
pub fn solve_regret_qp(system: &GammaSystem, opts: &QpOptions) -> Result<WeightSolution> {
    let c = -system.d();
    let (q, obj, iterations, converged) = minimize_simplex_qp(system.gamma(), &c, opts)?;
    finish_regret_solution(system, q, obj, iterations, converged)
}

fn transformed_system(system: &GammaSystem, poly: &PolytopeSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    let g = poly.vertex_matrix();
    if g.nrows() != system.size() {
        return Err(CateForgeError::invalid(
            "polytope vertex dimension does not match system size",
        ));
    }
    let gamma_poly = g.t().dot(system.gamma()).dot(&g);
    Ok((g, gamma_poly))
}

/// Minimax-regret weights restricted to the convex hull of `poly`. The
/// returned weights are in the original `S`-dimensional coordinates.
pub fn solve_regret_qp_polytope(
    system: &GammaSystem,
    poly: &PolytopeSpec,
    opts: &QpOptions,
) -> Result<WeightSolution> {
    let (g, gamma_poly) = transformed_system(system, poly)?;
    let d_poly = gamma_poly.diag().to_owned();
    let c = -&d_poly;
    let (qn, obj, iterations, converged) = minimize_simplex_qp(&gamma_poly, &c, opts)?;
    let qs = g.dot(&qn);
    let weights = clamp_weights(&qs);
    let regrets = system.per_site_regret(&weights);
    let worst = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Certify optimality in the transformed coordinates, where the KKT
    // system of the restricted problem lives.
    let poly_system = GammaSystem::new(symmetrize(gamma_poly))?;
    let residual = kkt_residual(&poly_system, &clamp_weights(&qn))?;
    Ok(WeightSolution {
        weights,
        objective: obj,
        worst_case_regret: worst.max(0.0),
        kkt_residual: residual,
        iterations,
        converged,
    })
}

// G'Gamma G picks up rounding asymmetry on the order of machine epsilon.
fn symmetrize(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    m
}

/// Relative-risk weights: `argmin q'Gamma q - 2 q'b` over the simplex or a
/// polytope restriction. `b_s = E[tau_s(X) f_base(X)]` under the target
/// covariates; `b = 0` encodes the zero-baseline maximin explained variance.
pub fn solve_relative_risk_qp(
    system: &GammaSystem,
    b: &Array1<f64>,
    poly: Option<&PolytopeSpec>,
    opts: &QpOptions,
) -> Result<WeightSolution> {
    if b.len() != system.size() {
        return Err(CateForgeError::invalid("baseline moment vector has wrong length"));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(CateForgeError::invalid("baseline moment vector has non-finite entries"));
    }
    let (weights, objective, iterations, converged, residual) = match poly {
        None => {
            let c = b.mapv(|x| -2.0 * x);
            let (q, obj, iters, conv) = minimize_simplex_qp(system.gamma(), &c, opts)?;
            let w = clamp_weights(&q);
            let res = projected_gradient_residual(system.gamma(), &c, &w)?;
            (w, obj, iters, conv, res)
        }
        Some(poly) => {
            let (g, gamma_poly) = transformed_system(system, poly)?;
            let b_poly = g.t().dot(b);
            let c = b_poly.mapv(|x| -2.0 * x);
            let (qn, obj, iters, conv) = minimize_simplex_qp(&gamma_poly, &c, opts)?;
            let res = projected_gradient_residual(&gamma_poly, &c, &qn)?;
            (clamp_weights(&g.dot(&qn)), obj, iters, conv, res)
        }
    };
    let regrets = system.per_site_regret(&weights);
    let worst = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(WeightSolution {
        weights,
        objective,
        worst_case_regret: worst.max(0.0),
        kkt_residual: residual,
        iterations,
        converged,
    })
}

/// Fixed-point residual `||q - P(q - grad/L)||_inf`; zero iff `q` is optimal
/// for the convex QP. Used for objectives outside the regret KKT system.
fn projected_gradient_residual(gamma: &Array2<f64>, c: &Array1<f64>, q: &Array1<f64>) -> Result<f64> {
    let lmax = linalg::lambda_max(gamma, 50).max(0.0);
    let scale = (2.0 * lmax).max(1.0);
    let grad = 2.0 * gamma.dot(q) + c;
    let moved = project_to_simplex(&(q - &(grad / scale)))?;
    Ok(q.iter()
        .zip(moved.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
