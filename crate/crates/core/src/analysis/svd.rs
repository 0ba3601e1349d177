use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Singular values of a `[rows, cols]` matrix in descending order, computed
/// by one-sided Jacobi rotations. There are `min(rows, cols)` of them.
pub fn singular_values(matrix: &Tensor) -> Result<Vec<f64>> {
    let [rows, cols] = *matrix.shape() else {
        return Err(Error::shape(format!("expected a matrix, got {:?}", matrix.shape())));
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("matrix has no entries".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite {
            op: "svd".into(),
            step: None,
        });
    }
    // Work on columns of the taller orientation, stored contiguously.
    let (m, n, columns): (usize, usize, Vec<Vec<f64>>) = if rows >= cols {
        let t = matrix.transpose()?;
        (rows, cols, (0..cols).map(|c| t.row(c).to_vec()).collect())
    } else {
        (cols, rows, (0..rows).map(|r| matrix.row(r).to_vec()).collect())
    };
    let mut a = columns;
    debug_assert!(a.iter().all(|c| c.len() == m));
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = a[p]
                    .iter()
                    .zip(&a[q])
                    .fold((0.0, 0.0, 0.0), |(al, be, ga), (&x, &y)| (al + x * x, be + y * y, ga + x * y));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(sigma)
}

/// Singular values divided by the largest one, and their natural logs.
/// Exact zeros have a log of negative infinity.
pub fn normalized_spectrum(matrix: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let sigma = singular_values(matrix)?;
    let top = sigma[0];
    if top == 0.0 {
        return Err(Error::Empty("all-zero matrix has no spectrum".into()));
    }
    let normalized: Vec<f64> = sigma.iter().map(|s| s / top).collect();
    let logs = normalized.iter().map(|s| s.ln()).collect();
    Ok((normalized, logs))
}
