//! Batch-center loss: a softmax over the speakers present in the batch,
//! with logits `s * cos(x_i, c_j) + b` against per-speaker centers
//! estimated as the batch means. Centers include the sample itself.

use crate::error::{Error, Result};
use crate::numkit::{axpy, dot, log_sum_exp, norm, stable_softmax, Matrix};

use super::{Batch, Diagnostics};

#[derive(Debug, Clone)]
pub struct Ge2eOutput {
    pub loss: f64,
    pub grad_features: Matrix,
    pub diagnostics: Diagnostics,
}

/// Distinct labels in ascending order plus the position of each sample's
/// label within that list.
fn speaker_index(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut speakers: Vec<usize> = labels.to_vec();
    speakers.sort_unstable();
    speakers.dedup();
    let pos: Vec<usize> = labels
        .iter()
        .map(|y| speakers.binary_search(y).expect("label present"))
        .collect();
    (speakers, pos)
}

/// Batch-center loss with centers estimated from the batch; gradients flow
/// through both the sample and the centers.
pub fn ge2e_loss(batch: &Batch, scale: f64, bias: f64) -> Result<Ge2eOutput> {
    let (speakers, sample_speaker) = speaker_index(&batch.labels);
    let n_spk = speakers.len();
    if n_spk < 2 {
        return Err(Error::Config(
            "batch-center loss needs at least 2 speakers in the batch".into(),
        ));
    }
    let n = batch.features.rows();
    let d = batch.features.cols();

    let mut counts = vec![0.0f64; n_spk];
    let mut centers = Matrix::zeros(n_spk, d);
    for i in 0..n {
        let k = sample_speaker[i];
        counts[k] += 1.0;
        axpy(1.0, batch.features.row(i), centers.row_mut(k));
    }
    for k in 0..n_spk {
        for c in 0..d {
            centers.set(k, c, centers.get(k, c) / counts[k]);
        }
    }
    let out = ge2e_core(batch, &centers, &sample_speaker, scale, bias, true, &counts)?;
    Ok(out)
}

/// Batch-center loss against externally supplied center rows (one row per
/// class index); no gradient flows into the centers. With `bias = 0` and
/// centers set to the output-layer weight columns, this reproduces the
/// modified softmax.
pub fn ge2e_loss_fixed_centers(batch: &Batch, centers: &Matrix, scale: f64, bias: f64) -> Result<Ge2eOutput> {
    if centers.cols() != batch.features.cols() {
        return Err(Error::Shape(format!(
            "centers have dimension {} but features have {}",
            centers.cols(),
            batch.features.cols()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= centers.rows()) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} centers",
            centers.rows()
        )));
    }
    let sample_speaker = batch.labels.clone();
    let counts = vec![1.0; centers.rows()];
    ge2e_core(batch, centers, &sample_speaker, scale, bias, false, &counts)
}

fn ge2e_core(
    batch: &Batch,
    centers: &Matrix,
    sample_speaker: &[usize],
    scale: f64,
    bias: f64,
    center_grads: bool,
    counts: &[f64],
) -> Result<Ge2eOutput> {
    let n = batch.features.rows();
    let d = batch.features.cols();
    let n_spk = centers.rows();
    let inv_n = 1.0 / n as f64;

    let mut center_norms = Vec::with_capacity(n_spk);
    for k in 0..n_spk {
        let cn = norm(centers.row(k));
        if cn <= 1e-12 {
            return Err(Error::Numeric(format!("center {k} has zero norm")));
        }
        center_norms.push(cn);
    }

    let mut feat_norms = Vec::with_capacity(n);
    let mut cosines = Matrix::zeros(n, n_spk);
    let mut probs = Matrix::zeros(n, n_spk);
    let mut loss = 0.0;
    let mut target_logit_sum = 0.0;
    for i in 0..n {
        let x = batch.features.row(i);
        let xn = norm(x);
        if xn <= 1e-12 {
            return Err(Error::Numeric(format!("feature row {i} has zero norm")));
        }
        feat_norms.push(xn);
        let mut logits = Vec::with_capacity(n_spk);
        for k in 0..n_spk {
            let cosv = dot(x, centers.row(k)) / (xn * center_norms[k]);
            cosines.set(i, k, cosv);
            logits.push(scale * cosv + bias);
        }
        let y = sample_speaker[i];
        loss += log_sum_exp(&logits) - logits[y];
        target_logit_sum += logits[y];
        probs.row_mut(i).copy_from_slice(&stable_softmax(&logits)?);
    }
    loss *= inv_n;

    // Direct route: d cos / d x = (c_hat - cos * x_hat) / ||x||.
    let mut grad_features = Matrix::zeros(n, d);
    // Center route, accumulated first: d cos / d c = (x_hat - cos * c_hat) / ||c||.
    let mut grad_centers = Matrix::zeros(n_spk, d);
    for i in 0..n {
        let x = batch.features.row(i);
        let xn = feat_norms[i];
        let y = sample_speaker[i];
        for k in 0..n_spk {
            let g = (probs.get(i, k) - f64::from(k == y)) * inv_n * scale;
            if g == 0.0 {
                continue;
            }
            let cosv = cosines.get(i, k);
            let cn = center_norms[k];
            for c in 0..d {
                let x_hat = x[c] / xn;
                let c_hat = centers.get(k, c) / cn;
                grad_features.set(
                    i,
                    c,
                    grad_features.get(i, c) + g * (c_hat - cosv * x_hat) / xn,
                );
                if center_grads {
                    grad_centers.set(
                        k,
                        c,
                        grad_centers.get(k, c) + g * (x_hat - cosv * c_hat) / cn,
                    );
                }
            }
        }
    }
    if center_grads {
        // Each center is the mean of its speaker's samples.
        for i in 0..n {
            let k = sample_speaker[i];
            for c in 0..d {
                grad_features.set(
                    i,
                    c,
                    grad_features.get(i, c) + grad_centers.get(k, c) / counts[k],
                );
            }
        }
    }

    Ok(Ge2eOutput {
        loss,
        grad_features,
        diagnostics: Diagnostics {
            target_logit_mean: target_logit_sum * inv_n,
            feature_norm_mean: feat_norms.iter().sum::<f64>() * inv_n,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_difference_grad, rel_err, RngStream};

    fn toy_batch(features: Matrix, labels: Vec<usize>, c: usize) -> Batch {
        Batch::new(features, labels, c).unwrap()
    }

    #[test]
    fn antipodal_two_speaker_hand_value() {
        let features = Matrix::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap();
        let batch = toy_batch(features, vec![0, 1], 2);
        let out = ge2e_loss(&batch, 1.0, 0.0).unwrap();
        // Centers equal the features; cos = +1 to own center, -1 to other.
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn bias_shift_is_invariant() {
        let mut rng = RngStream::new(8, 1);
        let features = Matrix::from_vec(6, 4, rng.draw_gaussian(24)).unwrap();
        let batch = toy_batch(features, vec![0, 0, 1, 1, 2, 2], 3);
        let a = ge2e_loss(&batch, 4.0, 0.0).unwrap().loss;
        let b = ge2e_loss(&batch, 4.0, 3.7).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_speaker_batch_is_an_error() {
        let features = Matrix::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        let batch = toy_batch(features, vec![1, 1], 2);
        assert!(ge2e_loss(&batch, 1.0, 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(8, 3);
        for _ in 0..50 {
            let n = 6;
            let d = 4;
            let data = rng.draw_gaussian(n * d);
            let labels = vec![0, 0, 1, 1, 2, 2];
            let features = Matrix::from_vec(n, d, data.clone()).unwrap();
            let batch = toy_batch(features, labels.clone(), 3);
            let out = ge2e_loss(&batch, 3.0, 0.5).unwrap();
            let fd = finite_difference_grad(
                |p| {
                    let pm = Matrix::from_vec(n, d, p.to_vec()).unwrap();
                    let pb = toy_batch(pm, labels.clone(), 3);
                    ge2e_loss(&pb, 3.0, 0.5).unwrap().loss
                },
                &data,
                1e-6,
            )
            .unwrap();
            for (k, &f) in fd.iter().enumerate() {
                assert!(
                    rel_err(out.grad_features.data()[k], f) < 1e-5,
                    "coordinate {k}: {} vs {}",
                    out.grad_features.data()[k],
                    f
                );
            }
        }
    }

    #[test]
    fn fixed_center_gradients_match_finite_differences() {
        let mut rng = RngStream::new(9, 3);
        let n = 4;
        let d = 3;
        let centers = Matrix::from_vec(3, d, rng.draw_gaussian(9)).unwrap();
        for _ in 0..30 {
            let data = rng.draw_gaussian(n * d);
            let labels = vec![0, 1, 2, 0];
            let features = Matrix::from_vec(n, d, data.clone()).unwrap();
            let batch = toy_batch(features, labels.clone(), 3);
            let out = ge2e_loss_fixed_centers(&batch, &centers, 2.0, 0.0).unwrap();
            let fd = finite_difference_grad(
                |p| {
                    let pm = Matrix::from_vec(n, d, p.to_vec()).unwrap();
                    let pb = toy_batch(pm, labels.clone(), 3);
                    ge2e_loss_fixed_centers(&pb, &centers, 2.0, 0.0).unwrap().loss
                },
                &data,
                1e-6,
            )
            .unwrap();
            for (k, &f) in fd.iter().enumerate() {
                assert!(rel_err(out.grad_features.data()[k], f) < 1e-5, "k={k}: analytic {} vs fd {f}", out.grad_features.data()[k]);
            }
        }
    }
}
