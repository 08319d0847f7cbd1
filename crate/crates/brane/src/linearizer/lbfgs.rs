//! Limited-memory BFGS with Armijo backtracking. Deterministic: fixed
//! memory, fixed update order, no randomness. Used for the logistic
//! surrogate fits and the full-batch retraining oracle.

use std::collections::VecDeque;

use super::{dot, l2};

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACK: usize = 48;
const CURVATURE_EPS: f64 = 1e-12;

pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `eval` (which returns the objective and writes its gradient)
/// from `x0` until the gradient norm drops to `tol` or `max_iter` iterations
/// pass. A failed line search ends the run early with `converged` reporting
/// whether the tolerance was already met.
pub(crate) fn minimize<F>(x0: Vec<f64>, tol: f64, max_iter: usize, mut eval: F) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = eval(&x, &mut g);
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rho_hist: VecDeque<f64> = VecDeque::new();

    let mut iterations = 0;
    while iterations < max_iter {
        let gnorm = l2(&g);
        if gnorm <= tol {
            return Minimum { x, value: f, grad_norm: gnorm, iterations, converged: true };
        }

        let mut dir = two_loop(&g, &s_hist, &y_hist, &rho_hist);
        if dot(&dir, &g) >= 0.0 {
            // Not a descent direction (stale curvature); restart on steepest
            // descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = g.iter().map(|&v| -v).collect();
        }
        let dg = dot(&dir, &g);

        let mut t = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut f_new = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            for i in 0..n {
                x_new[i] = t.mul_add(dir[i], x[i]);
            }
            f_new = eval(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + ARMIJO_C1 * t * dg {
                accepted = true;
                break;
            }
            t *= SHRINK;
        }
        if !accepted {
            // The objective refuses to decrease along a descent direction at
            // any representable step: numerically stalled.
            return Minimum { x, value: f, grad_norm: gnorm, iterations, converged: gnorm <= tol };
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS * l2(&s) * l2(&y) {
            if s_hist.len() == MEMORY {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        x = x_new;
        g = g_new;
        f = f_new;
        iterations += 1;
    }
    let gnorm = l2(&g);
    Minimum { x, value: f, grad_norm: gnorm, iterations, converged: gnorm <= tol }
}

/// Two-loop recursion: returns -H g for the implicit inverse-Hessian
/// estimate held in the (s, y) history.
fn two_loop(
    g: &[f64],
    s_hist: &VecDeque<Vec<f64>>,
    y_hist: &VecDeque<Vec<f64>>,
    rho_hist: &VecDeque<f64>,
) -> Vec<f64> {
    let mut q = g.to_vec();
    let k = s_hist.len();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
        for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
            *qv -= alpha[i] * yv;
        }
    }
    let gamma = if k > 0 {
        let y = &y_hist[k - 1];
        dot(&s_hist[k - 1], y) / dot(y, y)
    } else {
        1.0
    };
    for qv in q.iter_mut() {
        *qv *= gamma;
    }
    for i in 0..k {
        let beta = rho_hist[i] * dot(&y_hist[i], &q);
        for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
            *qv += (alpha[i] - beta) * sv;
        }
    }
    for qv in q.iter_mut() {
        *qv = -*qv;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges_to_center() {
        // f(x) = sum c_i (x_i - t_i)^2 with spread conditioning.
        let c = [1.0, 10.0, 100.0, 0.5];
        let t = [3.0, -2.0, 0.25, 7.0];
        let res = minimize(vec![0.0; 4], 1e-10, 200, |x, g| {
            let mut f = 0.0;
            for i in 0..4 {
                let e = x[i] - t[i];
                f += c[i] * e * e;
                g[i] = 2.0 * c[i] * e;
            }
            f
        });
        assert!(res.converged, "grad norm {}", res.grad_norm);
        for i in 0..4 {
            assert!((res.x[i] - t[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn rosenbrock_reaches_the_valley_floor() {
        let res = minimize(vec![-1.2, 1.0], 1e-8, 500, |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        });
        assert!(res.converged, "grad norm {}", res.grad_norm);
        assert!((res.x[0] - 1.0).abs() <= 1e-5);
        assert!((res.x[1] - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn already_optimal_input_returns_immediately() {
        let res = minimize(vec![0.0; 3], 1e-8, 100, |x, g| {
            for i in 0..3 {
                g[i] = 2.0 * x[i];
            }
            x.iter().map(|v| v * v).sum()
        });
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let res = minimize(vec![100.0], 1e-14, 1, |x, g| {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        });
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
    }
}
