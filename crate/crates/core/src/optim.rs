//! Quasi-Newton minimization (BFGS with backtracking Armijo line search).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Minimize `f` where `fg(x)` returns the value and gradient.
pub fn minimize<F>(mut fg: F, x0: DVector<f64>, opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut trace = vec![f];
    if n == 0 {
        return BfgsResult {
            x,
            f,
            grad_norm: 0.0,
            grad: g,
            iterations: 0,
            converged: true,
            trace,
        };
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gnorm = g.norm();
        if gnorm < opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 || !slope.is_finite() {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = -gnorm * gnorm;
        }
        let mut step = if fresh { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + &d * step;
            let (ft, gt) = fg(&xt);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                let yy = y.dot(&y);
                h = DMatrix::identity(n, n) * (sy / yy);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let stalled =
            (f - fnew).abs() <= 1e-16 * f.abs().max(1.0) && s.norm() <= 1e-14 * (1.0 + x.norm());
        x = xn;
        f = fnew;
        g = gn;
        trace.push(f);
        if stalled {
            break;
        }
    }
    let grad_norm = g.norm();
    BfgsResult {
        x,
        f,
        converged: grad_norm < opts.grad_tol,
        grad_norm,
        grad: g,
        iterations,
        trace,
    }
}

/// Central-difference gradient with step `1e-6·(1 + |x_j|)`.
pub fn numerical_gradient<F>(mut f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut xt = x.clone();
    for j in 0..x.len() {
        let h = 1e-6 * (1.0 + x[j].abs());
        xt[j] = x[j] + h;
        let fp = f(&xt);
        xt[j] = x[j] - h;
        let fm = f(&xt);
        xt[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_minimum() {
        let fg = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        };
        let res = minimize(
            fg,
            DVector::from_vec(vec![-1.2, 1.0]),
            BfgsOptions::default(),
        );
        assert!(res.converged, "{res:?}");
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn numerical_gradient_matches_analytic() {
        let f = |x: &DVector<f64>| x[0].sin() * x[1].exp() + x[0] * x[0];
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let g = numerical_gradient(f, &x);
        let exact = [
            0.3f64.cos() * (-0.7f64).exp() + 0.6,
            0.3f64.sin() * (-0.7f64).exp(),
        ];
        assert!((g[0] - exact[0]).abs() < 1e-8 && (g[1] - exact[1]).abs() < 1e-8);
    }
}
