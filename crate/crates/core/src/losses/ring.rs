use crate::error::{Error, Result};
use crate::numkit::{norm, Matrix};

/// Ring loss output: the penalty, its gradient on the raw features, and the
/// gradient on the learnable target norm.
#[derive(Debug, Clone)]
pub struct RingLossOutput {
    pub loss: f64,
    pub grad_features: Matrix,
    pub grad_target: f64,
}

/// Soft norm constraint `weight / N * sum_i (||x_i|| - target)^2`.
///
/// The target is a trainable scalar; `grad_target` feeds the same SGD step
/// as the network parameters.
pub fn ring_loss(features: &Matrix, target: f64, weight: f64) -> Result<RingLossOutput> {
    if weight < 0.0 {
        return Err(Error::Config("ring weight must be >= 0".into()));
    }
    if target <= 0.0 {
        return Err(Error::Config("ring target must be positive".into()));
    }
    let n = features.rows();
    let mut loss = 0.0;
    let mut grad_target = 0.0;
    let mut grad_features = Matrix::zeros(n, features.cols());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = features.row(i);
        let nn = norm(row);
        if nn <= 1e-12 {
            return Err(Error::Numeric(format!("feature row {i} has zero norm")));
        }
        let gap = nn - target;
        loss += weight * inv_n * gap * gap;
        grad_target -= 2.0 * weight * inv_n * gap;
        let k = 2.0 * weight * inv_n * gap / nn;
        for (c, &v) in row.iter().enumerate() {
            grad_features.set(i, c, k * v);
        }
    }
    Ok(RingLossOutput { loss, grad_features, grad_target })
}
