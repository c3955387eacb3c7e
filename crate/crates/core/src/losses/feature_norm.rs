use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix};

/// Cache for the normalization backward map: per-row norms and unit rows.
#[derive(Debug, Clone)]
pub struct FeatureNormCache {
    norms: Vec<f64>,
    units: Matrix,
    scale: f64,
}

/// Replaces each row x by `s * x / ||x||`.
pub fn normalize_features(features: &Matrix, scale: f64) -> Result<(Matrix, FeatureNormCache)> {
    if scale <= 0.0 {
        return Err(Error::Config("feature scale must be positive".into()));
    }
    let mut out = Matrix::zeros(features.rows(), features.cols());
    let mut units = Matrix::zeros(features.rows(), features.cols());
    let mut norms = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let row = features.row(i);
        let n = norm(row);
        if n <= 1e-12 {
            return Err(Error::Numeric(format!("feature row {i} has zero norm")));
        }
        for (c, &v) in row.iter().enumerate() {
            units.set(i, c, v / n);
            out.set(i, c, scale * v / n);
        }
        norms.push(n);
    }
    Ok((out, FeatureNormCache { norms, units, scale }))
}

/// Applies the projection Jacobian `s (I - u u^T) / ||x||` row by row.
pub fn normalize_features_backward(cache: &FeatureNormCache, grad_out: &Matrix) -> Matrix {
    assert_eq!(grad_out.rows(), cache.units.rows());
    assert_eq!(grad_out.cols(), cache.units.cols());
    let mut grad_in = Matrix::zeros(grad_out.rows(), grad_out.cols());
    for i in 0..grad_out.rows() {
        let g = grad_out.row(i);
        let u = cache.units.row(i);
        let radial = dot(g, u);
        let k = cache.scale / cache.norms[i];
        for c in 0..g.len() {
            grad_in.set(i, c, k * (g[c] - radial * u[c]));
        }
    }
    grad_in
}
