//! Minimum hyperspherical energy on the output-layer weight columns.
//!
//! The energy sums `1 / ||w_hat_{y_i} - w_hat_j||^2` over every batch row i
//! and every class j != y_i, normalized by `N (C - 1)`, so a class that
//! appears several times in the batch is repelled proportionally harder.
//! Gradients flow through the column normalization.

use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix};

pub fn mhe_loss(weights: &Matrix, labels: &[usize], weight: f64) -> Result<(f64, Matrix)> {
    let d = weights.rows();
    let c = weights.cols();
    if c < 2 {
        return Err(Error::Config("hyperspherical energy needs at least 2 classes".into()));
    }
    if labels.is_empty() {
        return Err(Error::Config("hyperspherical energy needs a non-empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }

    let mut w_hat = Matrix::zeros(d, c);
    let mut col_norms = Vec::with_capacity(c);
    for j in 0..c {
        let col = weights.col(j);
        let r = norm(&col);
        if r <= 1e-12 {
            return Err(Error::Numeric(format!("weight column {j} has zero norm")));
        }
        for (i, v) in col.iter().enumerate() {
            w_hat.set(i, j, v / r);
        }
        col_norms.push(r);
    }

    // How often each class appears as a batch label.
    let mut counts = vec![0usize; c];
    for &y in labels {
        counts[y] += 1;
    }

    let n = labels.len();
    let kappa = weight / (n as f64 * (c - 1) as f64);
    let mut loss = 0.0;
    let mut grad_hat = Matrix::zeros(d, c);
    for a in 0..c {
        if counts[a] == 0 {
            continue;
        }
        let t = kappa * counts[a] as f64;
        for b in 0..c {
            if b == a {
                continue;
            }
            let diff: Vec<f64> = (0..d).map(|r| w_hat.get(r, a) - w_hat.get(r, b)).collect();
            let e = dot(&diff, &diff);
            if e <= 1e-12 {
                return Err(Error::Numeric(format!(
                    "weight columns {a} and {b} coincide after normalization; energy is singular"
                )));
            }
            loss += t / e;
            let k = -2.0 * t / (e * e);
            for r in 0..d {
                grad_hat.set(r, a, grad_hat.get(r, a) + k * diff[r]);
                grad_hat.set(r, b, grad_hat.get(r, b) - k * diff[r]);
            }
        }
    }

    // Chain through the normalization: (I - w_hat w_hat^T) / ||w||.
    let mut grad = Matrix::zeros(d, c);
    for j in 0..c {
        let gh: Vec<f64> = (0..d).map(|r| grad_hat.get(r, j)).collect();
        let hat: Vec<f64> = (0..d).map(|r| w_hat.get(r, j)).collect();
        let radial = dot(&gh, &hat);
        for r in 0..d {
            grad.set(r, j, (gh[r] - radial * hat[r]) / col_norms[j]);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_difference_grad, rel_err, RngStream};

    #[test]
    fn antipodal_pair_hand_value() {
        // ||w1_hat - w2_hat||^2 = 4, so the single term is 1/4.
        let w = Matrix::from_rows(&[&[3.0, -5.0], &[0.0, 0.0]]).unwrap();
        let (loss, _) = mhe_loss(&w, &[0], 0.01).unwrap();
        assert!((loss - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_triple_hand_value() {
        // Each squared distance is 2; two terms over normalizer 1 * (3-1).
        let w = Matrix::from_rows(&[
            &[2.0, 0.0, 0.0],
            &[0.0, 0.5, 0.0],
            &[0.0, 0.0, 7.0],
        ])
        .unwrap();
        let (loss, _) = mhe_loss(&w, &[1], 0.01).unwrap();
        assert!((loss - 0.005).abs() < 1e-15);
    }

    #[test]
    fn coincident_columns_are_singular() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        assert!(mhe_loss(&w, &[0], 0.01).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(6, 2);
        for _ in 0..60 {
            let d = 4;
            let c = 5;
            let data = rng.draw_gaussian(d * c);
            let labels: Vec<usize> = (0..6).map(|_| rng.below(c)).collect();
            let w = Matrix::from_vec(d, c, data.clone()).unwrap();
            let (_, grad) = mhe_loss(&w, &labels, 0.01).unwrap();
            let fd = finite_difference_grad(
                |p| {
                    let pm = Matrix::from_vec(d, c, p.to_vec()).unwrap();
                    mhe_loss(&pm, &labels, 0.01).unwrap().0
                },
                &data,
                1e-6,
            )
            .unwrap();
            for (k, &f) in fd.iter().enumerate() {
                assert!(
                    rel_err(grad.data()[k], f) < 1e-5,
                    "coordinate {k}: {} vs {}",
                    grad.data()[k],
                    f
                );
            }
        }
    }

    #[test]
    fn descent_direction_repels_nearest_neighbor() {
        // Two nearly-coincident unit columns plus a distant one: descending
        // the energy must push the batch column away from its neighbor.
        let w = Matrix::from_rows(&[
            &[1.0, 0.995, 0.0],
            &[0.0, 0.0998, 0.0],
            &[0.0, 0.0, -1.0],
        ])
        .unwrap();
        let (_, grad) = mhe_loss(&w, &[0], 0.01).unwrap();
        // Direction from neighbor (column 1) to column 0.
        let away: Vec<f64> = (0..3)
            .map(|r| w.get(r, 0) / norm(&w.col(0)) - w.get(r, 1) / norm(&w.col(1)))
            .collect();
        let step: Vec<f64> = (0..3).map(|r| -grad.get(r, 0)).collect();
        assert!(dot(&away, &step) > 0.0, "descent step moves toward the neighbor");
    }
}
