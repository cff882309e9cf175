//! Brute-force grid search over the simplex, used as an independent check
//! on the projected-gradient solver.
//!
//! The search enumerates the rational lattice `{k/m}` on the simplex at a
//! coarse resolution, then repeatedly refines the lattice around the best
//! point found so far until the lattice spacing drops below the requested
//! resolution. The objective is convex, so local refinement around the
//! coarse minimizer reaches the global grid minimizer.

use ndarray::{Array1, Array2};

fn objective(gamma: &Array2<f64>, c: &Array1<f64>, q: &Array1<f64>) -> f64 {
    q.dot(&gamma.dot(q)) + c.dot(q)
}

/// Enumerates simplex lattice points with denominator `denom` whose entries
/// lie in the per-coordinate count windows `[lo_i, hi_i]`.
fn enumerate_lattice(
    denom: usize,
    lo: &[usize],
    hi: &[usize],
    mut visit: impl FnMut(&[usize]),
) {
    let s = lo.len();
    let mut counts = vec![0usize; s];
    fn recurse(
        dim: usize,
        remaining: usize,
        denom: usize,
        lo: &[usize],
        hi: &[usize],
        counts: &mut [usize],
        visit: &mut impl FnMut(&[usize]),
    ) {
        let s = lo.len();
        if dim == s - 1 {
            if remaining >= lo[dim] && remaining <= hi[dim] {
                counts[dim] = remaining;
                visit(counts);
            }
            return;
        }
        // Remaining coordinates must be able to absorb what is left.
        let tail_min: usize = lo[dim + 1..].iter().sum();
        let tail_max: usize = hi[dim + 1..].iter().sum();
        let lo_here = lo[dim].max(remaining.saturating_sub(tail_max));
        let hi_here = hi[dim].min(remaining.saturating_sub(tail_min));
        let mut k = lo_here;
        while k <= hi_here {
            counts[dim] = k;
            recurse(dim + 1, remaining - k, denom, lo, hi, counts, visit);
            k += 1;
        }
    }
    recurse(0, denom, denom, lo, hi, &mut counts, &mut visit);
}

/// Grid minimizer of `q'Gamma q + c'q` over the simplex at the given final
/// lattice resolution. Returns the best lattice point and its objective.
pub fn minimize_qp_on_simplex_grid(
    gamma: &Array2<f64>,
    c: &Array1<f64>,
    resolution: f64,
) -> (Array1<f64>, f64) {
    minimize_qp_on_simplex_grid_constrained(gamma, c, resolution, |_| true)
}

/// Same as [`minimize_qp_on_simplex_grid`] but only over lattice points
/// accepted by `feasible`, e.g. to restrict to a capped region.
pub fn minimize_qp_on_simplex_grid_constrained(
    gamma: &Array2<f64>,
    c: &Array1<f64>,
    resolution: f64,
    feasible: impl Fn(&Array1<f64>) -> bool,
) -> (Array1<f64>, f64) {
    let s = gamma.nrows();
    assert!(s >= 1 && resolution > 0.0);
    if s == 1 {
        let q = Array1::from_elem(1, 1.0);
        let obj = objective(gamma, c, &q);
        return (q, obj);
    }

    let mut denom = 20usize;
    let mut lo = vec![0usize; s];
    let mut hi = vec![denom; s];
    let mut best_q: Option<Array1<f64>> = None;
    let mut best_obj = f64::INFINITY;

    loop {
        let mut level_best: Option<Vec<usize>> = None;
        let mut level_obj = f64::INFINITY;
        enumerate_lattice(denom, &lo, &hi, |counts| {
            let q = Array1::from_iter(counts.iter().map(|&k| k as f64 / denom as f64));
            if !feasible(&q) {
                return;
            }
            let obj = objective(gamma, c, &q);
            if obj < level_obj {
                level_obj = obj;
                level_best = Some(counts.to_vec());
            }
        });
        let center = match level_best {
            Some(c) => c,
            // Window missed the feasible region (only possible with a very
            // tight `feasible`); widen back to the full simplex and retry.
            None => {
                lo = vec![0; s];
                hi = vec![denom; s];
                continue;
            }
        };
        if level_obj < best_obj {
            best_obj = level_obj;
            best_q = Some(Array1::from_iter(
                center.iter().map(|&k| k as f64 / denom as f64),
            ));
        }
        if 1.0 / denom as f64 <= resolution {
            break;
        }
        // Triple the resolution and search a window of +-2 old cells around
        // the current best point.
        let new_denom = denom * 3;
        lo = center
            .iter()
            .map(|&k| (k * 3).saturating_sub(6))
            .collect();
        hi = center.iter().map(|&k| ((k * 3) + 6).min(new_denom)).collect();
        denom = new_denom;
    }
    (best_q.unwrap(), best_obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grid_finds_midpoint_minimum() {
        // 2 t^2 - 2 t over the 1-simplex: minimum -0.5 at t = 0.5.
        let gamma = array![[0.0, 0.0], [0.0, 2.0]];
        let c = array![0.0, -2.0];
        let (q, obj) = minimize_qp_on_simplex_grid(&gamma, &c, 1e-3);
        assert!((q[1] - 0.5).abs() < 2e-3);
        assert!((obj - (-0.5)).abs() < 1e-5);
    }

    #[test]
    fn grid_respects_feasibility_filter() {
        let gamma = array![[1.0, 0.0], [0.0, 1.0]];
        let c = array![-2.0, 0.0];
        // Unconstrained minimum is at e1; cap the first coordinate at 0.6.
        let (q, _) = minimize_qp_on_simplex_grid_constrained(&gamma, &c, 1e-3, |q| q[0] <= 0.6);
        assert!(q[0] <= 0.6 + 1e-12);
        assert!((q[0] - 0.6).abs() < 5e-3);
    }
}
