//! Gauss–Hermite rules by the Golub–Welsch eigenvalue method.

use nalgebra::DMatrix;

pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `n`-point rule for `∫ f(x) e^{−x²} dx`.
pub fn rule(n: usize) -> Rule {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

impl Rule {
    /// `E f(X)` for `X ~ N(mean, var)`.
    pub fn normal_expectation(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * var).sqrt();
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mean + s * x))
            .sum();
        total / std::f64::consts::PI.sqrt()
    }
}
