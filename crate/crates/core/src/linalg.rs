//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance for rank decisions.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RankDeficient;

/// Result of a weighted least-squares fit.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: DVector<f64>,
    /// (X'WX)^-1
    pub xtwx_inv: DMatrix<f64>,
    pub residuals: DVector<f64>,
    /// Σ w r² / (n_pos − p), with n_pos the number of positive weights.
    pub sigma2: f64,
}

/// Solves min Σ w_i (y_i − x_i'β)² through a QR factorization of √W·X.
/// Rows with zero weight do not contribute.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
) -> Result<WlsFit, RankDeficient> {
    let (n, p) = x.shape();
    debug_assert_eq!(y.len(), n);
    debug_assert_eq!(w.len(), n);
    let rows: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    if rows.len() < p || p == 0 {
        return Err(RankDeficient);
    }
    let m = rows.len();
    let mut a = DMatrix::<f64>::zeros(m, p);
    let mut b = DVector::<f64>::zeros(m);
    for (r, &i) in rows.iter().enumerate() {
        let s = w[i].sqrt();
        for j in 0..p {
            a[(r, j)] = s * x[(i, j)];
        }
        b[r] = s * y[i];
    }
    let qr = a.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..p).any(|j| r[(j, j)].abs() <= 1e-10 * max_diag) {
        return Err(RankDeficient);
    }
    let qtb = qr.q().transpose() * &b;
    let coefficients = r
        .solve_upper_triangular(&qtb)
        .ok_or(RankDeficient)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(RankDeficient)?;
    let xtwx_inv = &r_inv * r_inv.transpose();
    let fitted = x * &coefficients;
    let residuals = DVector::from_iterator(n, (0..n).map(|i| y[i] - fitted[i]));
    let rss: f64 = rows.iter().map(|&i| w[i] * residuals[i] * residuals[i]).sum();
    let dof = m.saturating_sub(p);
    let sigma2 = if dof > 0 { rss / dof as f64 } else { f64::NAN };
    Ok(WlsFit {
        coefficients,
        xtwx_inv,
        residuals,
        sigma2,
    })
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, rejecting
/// pivots below `PIVOT_TOL` relative to the largest diagonal entry.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, RankDeficient> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    if n == 0 || scale == 0.0 {
        return Err(RankDeficient);
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(RankDeficient);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Unbiased (n − 1) covariance of the given rows, with columns as variables.
pub fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for r in rows {
        for a in 0..p {
            let da = r[a] - mean[a];
            for b in a..p {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the n − 1 denominator.
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() as f64 - 1.0)).sqrt()
}

pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

/// Weighted variance with reliability-weight correction; equals the
/// ordinary n − 1 sample variance when all weights are one.
pub fn weighted_variance(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let m = weighted_mean(x, w);
    let ss: f64 = x.iter().zip(w).map(|(a, b)| b * (a - m) * (a - m)).sum();
    let denom = sw - sw2 / sw;
    if denom > 0.0 {
        ss / denom
    } else {
        0.0
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wls_recovers_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = weighted_least_squares(&x, &y, &[1.0, 2.0, 1.0, 0.5]).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wls_flags_collinear_design() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(weighted_least_squares(&x, &[1.0, 2.0, 3.0], &[1.0; 3]).is_err());
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_lower(&a).is_err());
        let b = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_lower(&b).unwrap();
        assert!((&l * l.transpose() - b).abs().max() < 1e-12);
    }

    #[test]
    fn weighted_variance_matches_sample_variance() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let v = weighted_variance(&x, &[1.0; 4]);
        assert!((v - sample_sd(&x).powi(2)).abs() < 1e-12);
    }
}
