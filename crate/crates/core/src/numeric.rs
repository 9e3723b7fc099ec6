//! Normal-distribution primitives and small dense linear-algebra helpers.
//!
//! The lower-tail inverse Mills ratio switches to a continued fraction below
//! `k = -8`, which keeps `φ(k)/Φ(k)` finite and accurate far past the point
//! where `Φ(k)` underflows.

use nalgebra::{DMatrix, DVector};

use crate::error::{GivehrError, Result};

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const MILLS_SWITCH: f64 = -8.0;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `φ(x)/Φ(x)`, finite for every finite `x`.
pub fn inverse_mills(x: f64) -> f64 {
    if x > MILLS_SWITCH {
        norm_pdf(x) / norm_cdf(x)
    } else {
        1.0 / upper_mills_cf(-x)
    }
}

/// `log Φ(x)` without underflow in the lower tail.
pub fn norm_log_cdf(x: f64) -> f64 {
    if x > MILLS_SWITCH {
        norm_cdf(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + upper_mills_cf(-x).ln()
    }
}

/// Mills ratio `(1 - Φ(z))/φ(z)` for `z ≥ 8` by Laplace's continued fraction.
fn upper_mills_cf(z: f64) -> f64 {
    let mut t = z;
    for k in (1..=60).rev() {
        t = z + k as f64 / t;
    }
    1.0 / t
}

/// Standard normal quantile (Acklam's rational approximation refined by one Halley step).
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = norm_cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Solve `a x = b` through an SVD, refusing matrices with condition number above `max_condition`.
///
/// Returns the solution and the condition number. One step of iterative refinement is applied.
pub fn solve_checked(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    what: &str,
    max_condition: f64,
) -> Result<(DVector<f64>, f64)> {
    let n = a.ncols();
    if n == 0 {
        return Ok((DVector::zeros(0), 1.0));
    }
    let svd = a.clone().svd(true, true);
    let (imax, smax) = svd.singular_values.argmax();
    let (imin, smin) = svd.singular_values.argmin();
    let _ = imax;
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !condition.is_finite() || condition > max_condition || !smax.is_finite() {
        let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
        let direction = v_t.row(imin).iter().copied().collect();
        return Err(GivehrError::Singular {
            what: what.to_string(),
            condition,
            direction,
        });
    }
    let mut x = svd
        .solve(b, 0.0)
        .map_err(|e| GivehrError::InvalidInput(e.to_string()))?;
    let r = b - a * &x;
    if let Ok(dx) = svd.solve(&r, 0.0) {
        x += dx;
    }
    Ok((x, condition))
}

/// Eigenvector for the smallest eigenvalue of a symmetric matrix.
pub fn null_direction(sym: &DMatrix<f64>) -> Vec<f64> {
    let eig = sym.clone().symmetric_eigen();
    let (imin, _) = eig.eigenvalues.argmin();
    eig.eigenvectors.column(imin).iter().copied().collect()
}

/// Indices of columns that are not (numerically) linear combinations of earlier kept columns.
///
/// Columns are compared after scaling to unit norm; a column whose residual norm after
/// projection falls below `tol` is dropped.
pub fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let mut r = col / norm;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > tol {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}

/// Weighted least squares via an SVD of the row-scaled design. `weights = None` gives OLS.
pub fn least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let (mut xs, mut ys) = (x.clone(), y.clone());
    if let Some(w) = weights {
        for i in 0..x.nrows() {
            let s = w[i].sqrt();
            xs.row_mut(i).scale_mut(s);
            ys[i] *= s;
        }
    }
    let svd = xs.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if x.ncols() > x.nrows() || smin <= smax * 1e-12 {
        let direction = {
            let (imin, _) = svd.singular_values.argmin();
            svd.v_t
                .as_ref()
                .map(|v| v.row(imin).iter().copied().collect())
                .unwrap_or_default()
        };
        return Err(GivehrError::Singular {
            what: "least-squares design".into(),
            condition: if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            },
            direction,
        });
    }
    svd.solve(&ys, 0.0)
        .map_err(|e| GivehrError::InvalidInput(e.to_string()))
}

/// Sample covariance of the rows of `rows` (each an estimate vector), with divisor `k - 1`.
pub fn sample_covariance(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let k = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    let mut mean = DVector::zeros(p);
    for r in rows {
        mean += r;
    }
    if k > 0 {
        mean /= k as f64;
    }
    let mut cov = DMatrix::zeros(p, p);
    for r in rows {
        let d = r - &mean;
        cov += &d * d.transpose();
    }
    if k > 1 {
        cov /= (k - 1) as f64;
    }
    cov
}
