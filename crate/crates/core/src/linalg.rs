//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Relative pivot below which a column is treated as a linear combination of the
/// columns before it.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// Sequential Cholesky of a Gram matrix that reports which columns are collinear with
/// earlier ones instead of failing on the first bad pivot.
pub fn collinear_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let k = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut kept = vec![false; k];
    let mut bad = Vec::new();
    for j in 0..k {
        let scale = gram[(j, j)];
        if !(scale > 0.0) || !scale.is_finite() {
            bad.push(j);
            continue;
        }
        let mut d = scale;
        for p in 0..j {
            if kept[p] {
                d -= l[(j, p)] * l[(j, p)];
            }
        }
        if d <= COLLINEARITY_TOL * scale {
            bad.push(j);
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        kept[j] = true;
        for i in (j + 1)..k {
            let mut s = gram[(i, j)];
            for p in 0..j {
                if kept[p] {
                    s -= l[(i, p)] * l[(j, p)];
                }
            }
            l[(i, j)] = s / ljj;
        }
    }
    bad
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// Least squares `y ~ x` through the normal equations. Returns the coefficients and
/// `(x'x)^{-1}`; collinear columns are reported by index.
pub fn least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> std::result::Result<(DVector<f64>, DMatrix<f64>), Vec<usize>> {
    let gram = x.transpose() * x;
    let bad = collinear_columns(&gram);
    if !bad.is_empty() {
        return Err(bad);
    }
    let inv = spd_inverse(&gram).map_err(|_| (0..x.ncols()).collect::<Vec<_>>())?;
    let xty = x.transpose() * y;
    Ok((&inv * xty, inv))
}

/// Symmetrize and floor negative eigenvalues at zero. The flag reports whether any
/// eigenvalue was floored.
pub fn floor_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (sym, false);
    }
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&floored) * q.transpose();
    (rebuilt, true)
}

/// `ln |det m|` and the sign, from an LU factorisation.
pub fn lu_log_det(m: &DMatrix<f64>) -> (f64, f64) {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut log = 0.0;
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d < 0.0 {
            sign = -sign;
        }
        log += d.abs().ln();
    }
    (log, sign)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}
