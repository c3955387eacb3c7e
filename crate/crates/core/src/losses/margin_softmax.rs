//! Forward and backward passes for the softmax family.
//!
//! One code path serves plain softmax (raw `w^T x` logits) and the
//! normalized family (modified softmax and the three margin variants). For
//! the normalized family the non-target logit of class j is
//! `sigma_i * cos(theta_j)` and the target logit is
//! `sigma_i * psi_train(cos(theta_y))`, where `sigma_i` is the fixed scale
//! when features are normalized and the raw feature norm otherwise.
//!
//! Trivial margins skip the psi/blend arithmetic entirely, so a margin kind
//! at zero margin is bit-identical to modified softmax.

use crate::error::{Error, Result};
use crate::margins::{anneal_lambda, blended_target_logit};
use crate::numkit::{axpy, dot, log_sum_exp, norm, stable_softmax, Matrix};
use crate::par;

use super::{Batch, Diagnostics, LossConfig, LossKind};

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct MarginSoftmaxCache {
    kind: LossKind,
    normalize_features: bool,
    scale: f64,
    features: Matrix,
    labels: Vec<usize>,
    /// Softmax probabilities per sample (N x C).
    probs: Matrix,
    /// Cosines per sample/class (N x C); unused for plain softmax.
    cos: Matrix,
    /// Normalized weight columns (D x C); raw weights for plain softmax.
    w_hat: Matrix,
    weight_norms: Vec<f64>,
    feat_norms: Vec<f64>,
    /// Blended target logit value and u-derivative per sample.
    psi_value: Vec<f64>,
    psi_deriv: Vec<f64>,
    trivial: bool,
}

#[derive(Debug, Clone)]
pub struct MarginSoftmaxForward {
    pub loss: f64,
    pub diagnostics: Diagnostics,
    pub cache: MarginSoftmaxCache,
}

struct SampleTerms {
    loss: f64,
    target_logit: f64,
    probs: Vec<f64>,
    cos: Vec<f64>,
    psi_value: f64,
    psi_deriv: f64,
}

fn check_shapes(batch: &Batch, weights: &Matrix) -> Result<()> {
    if weights.rows() != batch.features.cols() {
        return Err(Error::Shape(format!(
            "weights have {} rows but features have dimension {}",
            weights.rows(),
            batch.features.cols()
        )));
    }
    if weights.cols() != batch.n_classes {
        return Err(Error::Shape(format!(
            "weights have {} columns but batch declares {} classes",
            weights.cols(),
            batch.n_classes
        )));
    }
    Ok(())
}

/// Normalizes weight columns, erroring on zero-norm columns.
fn normalize_columns(weights: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut w_hat = Matrix::zeros(weights.rows(), weights.cols());
    let mut norms = Vec::with_capacity(weights.cols());
    for j in 0..weights.cols() {
        let col = weights.col(j);
        let r = norm(&col);
        if r <= 1e-12 {
            return Err(Error::Numeric(format!("weight column {j} has zero norm")));
        }
        for (i, v) in col.iter().enumerate() {
            w_hat.set(i, j, v / r);
        }
        norms.push(r);
    }
    Ok((w_hat, norms))
}

/// Mean cross-entropy over the batch with margin-adjusted target logits.
pub fn margin_softmax_forward(
    batch: &Batch,
    weights: &Matrix,
    config: &LossConfig,
    step: u64,
) -> Result<MarginSoftmaxForward> {
    check_shapes(batch, weights)?;
    let n = batch.features.rows();
    let c = batch.n_classes;

    if config.kind == LossKind::Softmax {
        return plain_softmax_forward(batch, weights, config);
    }

    let (w_hat, weight_norms) = normalize_columns(weights)?;
    let mut feat_norms = Vec::with_capacity(n);
    for i in 0..n {
        let nn = norm(batch.features.row(i));
        if nn <= 1e-12 {
            return Err(Error::Numeric(format!("feature row {i} has zero norm")));
        }
        feat_norms.push(nn);
    }

    let trivial = config.margins.is_trivial() || config.kind == LossKind::ModifiedSoftmax;
    let lambda = anneal_lambda(step, &config.anneal);

    let per_sample: Vec<Result<SampleTerms>> = par::map_range(n, |i| {
        let x = batch.features.row(i);
        let y = batch.labels[i];
        let n_i = feat_norms[i];
        let sigma = if config.normalize_features { config.scale } else { n_i };
        let mut cos = Vec::with_capacity(c);
        for j in 0..c {
            let mut d = 0.0;
            for (r, &xv) in x.iter().enumerate() {
                d += w_hat.get(r, j) * xv;
            }
            cos.push(d / n_i);
        }
        let u = cos[y];
        let (psi_value, psi_deriv) =
            if trivial { (u, 1.0) } else { blended_target_logit(u, &config.margins, lambda) };
        let mut logits: Vec<f64> = cos.iter().map(|&cj| sigma * cj).collect();
        logits[y] = sigma * psi_value;
        let target_logit = logits[y];
        let loss = log_sum_exp(&logits) - target_logit;
        let probs = stable_softmax(&logits)?;
        Ok(SampleTerms { loss, target_logit, probs, cos, psi_value, psi_deriv })
    });

    reduce_samples(per_sample, batch, config, trivial, w_hat, weight_norms, feat_norms)
}

fn plain_softmax_forward(
    batch: &Batch,
    weights: &Matrix,
    config: &LossConfig,
) -> Result<MarginSoftmaxForward> {
    let n = batch.features.rows();
    let c = batch.n_classes;
    let feat_norms: Vec<f64> = (0..n).map(|i| norm(batch.features.row(i))).collect();
    let per_sample: Vec<Result<SampleTerms>> = par::map_range(n, |i| {
        let x = batch.features.row(i);
        let y = batch.labels[i];
        let mut logits = Vec::with_capacity(c);
        for j in 0..c {
            let mut d = 0.0;
            for (r, &xv) in x.iter().enumerate() {
                d += weights.get(r, j) * xv;
            }
            logits.push(d);
        }
        let target_logit = logits[y];
        let loss = log_sum_exp(&logits) - target_logit;
        let probs = stable_softmax(&logits)?;
        Ok(SampleTerms { loss, target_logit, probs, cos: Vec::new(), psi_value: 0.0, psi_deriv: 1.0 })
    });
    reduce_samples(per_sample, batch, config, true, weights.clone(), vec![1.0; c], feat_norms)
}

fn reduce_samples(
    per_sample: Vec<Result<SampleTerms>>,
    batch: &Batch,
    config: &LossConfig,
    trivial: bool,
    w_hat: Matrix,
    weight_norms: Vec<f64>,
    feat_norms: Vec<f64>,
) -> Result<MarginSoftmaxForward> {
    let n = batch.features.rows();
    let c = batch.n_classes;
    let mut loss = 0.0;
    let mut target_logit_sum = 0.0;
    let mut probs = Matrix::zeros(n, c);
    let mut cos = Matrix::zeros(n, if config.kind == LossKind::Softmax { 0 } else { c });
    let mut psi_value = Vec::with_capacity(n);
    let mut psi_deriv = Vec::with_capacity(n);
    for (i, terms) in per_sample.into_iter().enumerate() {
        let t = terms?;
        loss += t.loss;
        target_logit_sum += t.target_logit;
        probs.row_mut(i).copy_from_slice(&t.probs);
        if !t.cos.is_empty() {
            cos.row_mut(i).copy_from_slice(&t.cos);
        }
        psi_value.push(t.psi_value);
        psi_deriv.push(t.psi_deriv);
    }
    loss /= n as f64;
    let diagnostics = Diagnostics {
        target_logit_mean: target_logit_sum / n as f64,
        feature_norm_mean: feat_norms.iter().sum::<f64>() / n as f64,
    };
    Ok(MarginSoftmaxForward {
        loss,
        diagnostics,
        cache: MarginSoftmaxCache {
            kind: config.kind,
            normalize_features: config.normalize_features,
            scale: config.scale,
            features: batch.features.clone(),
            labels: batch.labels.clone(),
            probs,
            cos,
            w_hat,
            weight_norms,
            feat_norms,
            psi_value,
            psi_deriv,
            trivial,
        },
    })
}

/// Exact gradients of the forward loss with respect to the raw features and
/// the raw (pre-normalization) weight matrix.
pub fn margin_softmax_backward(cache: &MarginSoftmaxCache) -> (Matrix, Matrix) {
    let n = cache.features.rows();
    let d = cache.features.cols();
    let c = cache.probs.cols();
    let inv_n = 1.0 / n as f64;

    if cache.kind == LossKind::Softmax {
        let grad_rows = par::map_range(n, |i| {
            let mut row = vec![0.0; d];
            for j in 0..c {
                let g = (cache.probs.get(i, j) - f64::from(cache.labels[i] == j)) * inv_n;
                for (r, out) in row.iter_mut().enumerate() {
                    *out += g * cache.w_hat.get(r, j);
                }
            }
            row
        });
        let mut grad_features = Matrix::zeros(n, d);
        for (i, row) in grad_rows.into_iter().enumerate() {
            grad_features.row_mut(i).copy_from_slice(&row);
        }
        let grad_cols = par::map_range(c, |j| {
            let mut col = vec![0.0; d];
            for i in 0..n {
                let g = (cache.probs.get(i, j) - f64::from(cache.labels[i] == j)) * inv_n;
                axpy(g, cache.features.row(i), &mut col);
            }
            col
        });
        let mut grad_weights = Matrix::zeros(d, c);
        for (j, col) in grad_cols.into_iter().enumerate() {
            for r in 0..d {
                grad_weights.set(r, j, col[r]);
            }
        }
        return (grad_features, grad_weights);
    }

    // Margin family. `a` is the logit gradient with the target entry scaled
    // by the psi derivative; sigma is the per-sample effective scale.
    let a = |i: usize, j: usize| -> f64 {
        let g = (cache.probs.get(i, j) - f64::from(cache.labels[i] == j)) * inv_n;
        if j == cache.labels[i] {
            g * cache.psi_deriv[i]
        } else {
            g
        }
    };
    let sigma = |i: usize| -> f64 {
        if cache.normalize_features {
            cache.scale
        } else {
            cache.feat_norms[i]
        }
    };

    let grad_rows = par::map_range(n, |i| {
        let x = cache.features.row(i);
        let n_i = cache.feat_norms[i];
        let y = cache.labels[i];
        let mut row = vec![0.0; d];
        let mut a_dot_cos = 0.0;
        for j in 0..c {
            let aij = a(i, j);
            a_dot_cos += aij * cache.cos.get(i, j);
            for (r, out) in row.iter_mut().enumerate() {
                *out += aij * cache.w_hat.get(r, j);
            }
        }
        if cache.normalize_features {
            // d/dx of s * cos: s (w_hat - cos * x_hat) / ||x||, summed over j.
            let k = cache.scale / n_i;
            for (r, out) in row.iter_mut().enumerate() {
                *out = k * (*out - a_dot_cos * x[r] / n_i);
            }
        } else {
            // Non-target logits reduce to w_hat . x; the target keeps a
            // radial term because sigma = ||x|| itself depends on x.
            let g_y = (cache.probs.get(i, y) - 1.0) * inv_n;
            let radial = g_y * (cache.psi_value[i] - cache.psi_deriv[i] * cache.cos.get(i, y));
            if radial != 0.0 {
                for (r, out) in row.iter_mut().enumerate() {
                    *out += radial * x[r] / n_i;
                }
            }
        }
        row
    });
    let mut grad_features = Matrix::zeros(n, d);
    for (i, row) in grad_rows.into_iter().enumerate() {
        grad_features.row_mut(i).copy_from_slice(&row);
    }

    let grad_cols = par::map_range(c, |j| {
        let mut col = vec![0.0; d];
        let r_j = cache.weight_norms[j];
        for i in 0..n {
            let aij = a(i, j);
            if aij == 0.0 {
                continue;
            }
            let x = cache.features.row(i);
            let n_i = cache.feat_norms[i];
            let k = aij * sigma(i) / r_j;
            let cij = cache.cos.get(i, j);
            for (r, out) in col.iter_mut().enumerate() {
                *out += k * (x[r] / n_i - cij * cache.w_hat.get(r, j));
            }
        }
        col
    });
    let mut grad_weights = Matrix::zeros(d, c);
    for (j, col) in grad_cols.into_iter().enumerate() {
        for r in 0..d {
            grad_weights.set(r, j, col[r]);
        }
    }
    (grad_features, grad_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::{AnnealSchedule, MarginSet};
    use crate::numkit::RngStream;

    fn config(kind: LossKind, margins: MarginSet, normalize_features: bool) -> LossConfig {
        LossConfig {
            kind,
            scale: 1.0,
            normalize_weights: kind != LossKind::Softmax,
            normalize_features,
            margins,
            ring_weight: 0.0,
            ring_target: 20.0,
            mhe_weight: 0.0,
            anneal: AnnealSchedule::disabled(),
        }
    }

    fn random_batch(rng: &mut RngStream, n: usize, d: usize, c: usize) -> (Batch, Matrix) {
        let features = Matrix::from_vec(n, d, rng.draw_gaussian(n * d)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let weights = Matrix::from_vec(d, c, rng.draw_gaussian(d * c)).unwrap();
        (Batch::new(features, labels, c).unwrap(), weights)
    }

    #[test]
    fn uniform_logits_give_log_c() {
        // All-zero weights would be a zero-norm column, so use plain softmax
        // with identical columns: every logit equal, loss = ln(10).
        let c = 10;
        let d = 4;
        let mut weights = Matrix::zeros(d, c);
        for j in 0..c {
            for r in 0..d {
                weights.set(r, j, 0.37);
            }
        }
        let features = Matrix::from_vec(1, d, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let batch = Batch::new(features, vec![3], c).unwrap();
        let cfg = config(LossKind::Softmax, MarginSet::trivial(), false);
        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap();
        assert!((fwd.loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_two_class_modified_softmax() {
        // Feature aligned with its own column and anti-aligned with the
        // other: cos = +1 / -1, loss = ln(1 + e^-2) at s = 1.
        let weights = Matrix::from_rows(&[&[2.0, -3.0], &[0.0, 0.0]]).unwrap();
        let features = Matrix::from_rows(&[&[5.0, 0.0]]).unwrap();
        let batch = Batch::new(features, vec![0], 2).unwrap();
        let cfg = config(LossKind::ModifiedSoftmax, MarginSet::trivial(), true);
        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap();
        assert!((fwd.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((fwd.loss - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn aligned_two_class_amsoftmax() {
        // psi = 1 - 0.2 on the target, cos = -1 on the non-target:
        // loss = ln(1 + e^-(0.8 + 1)).
        let weights = Matrix::from_rows(&[&[2.0, -3.0], &[0.0, 0.0]]).unwrap();
        let features = Matrix::from_rows(&[&[5.0, 0.0]]).unwrap();
        let batch = Batch::new(features, vec![0], 2).unwrap();
        let cfg = config(
            LossKind::AmSoftmax,
            MarginSet::new(1.0, 0.0, 0.2).unwrap(),
            true,
        );
        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap();
        // The margin applies at the cosine clamp boundary: cos is clamped to
        // 1 - 1e-7 before the margin, which perturbs nothing at 1e-6 scale.
        assert!((fwd.loss - (1.0 + (-1.8f64).exp()).ln()).abs() < 1e-6);
        assert!((fwd.loss - 0.152978).abs() < 1e-6);
    }

    #[test]
    fn zero_margin_kinds_match_modified_softmax_bitwise() {
        let mut rng = RngStream::new(9, 5);
        for kind in [LossKind::AmSoftmax, LossKind::ArcSoftmax, LossKind::ASoftmax] {
            for _ in 0..100 {
                let (batch, weights) = random_batch(&mut rng, 6, 5, 4);
                let zeroed = config(kind, MarginSet::trivial(), true);
                let baseline = config(LossKind::ModifiedSoftmax, MarginSet::trivial(), true);
                let a = margin_softmax_forward(&batch, &weights, &zeroed, 17).unwrap();
                let b = margin_softmax_forward(&batch, &weights, &baseline, 17).unwrap();
                assert_eq!(a.loss.to_bits(), b.loss.to_bits());
                let (ga_f, ga_w) = margin_softmax_backward(&a.cache);
                let (gb_f, gb_w) = margin_softmax_backward(&b.cache);
                assert_eq!(ga_f, gb_f);
                assert_eq!(ga_w, gb_w);
            }
        }
    }

    #[test]
    fn permuting_rows_permutes_feature_grads() {
        let mut rng = RngStream::new(21, 3);
        let (batch, weights) = random_batch(&mut rng, 5, 4, 3);
        let cfg = config(
            LossKind::AmSoftmax,
            MarginSet::new(1.0, 0.0, 0.2).unwrap(),
            true,
        );
        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap();
        let (gf, gw) = margin_softmax_backward(&fwd.cache);

        let perm = [3usize, 0, 4, 2, 1];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| batch.features.row(i)).collect();
        let permuted = Batch::new(
            Matrix::from_rows(&rows).unwrap(),
            perm.iter().map(|&i| batch.labels[i]).collect(),
            3,
        )
        .unwrap();
        let fwd_p = margin_softmax_forward(&permuted, &weights, &cfg, 0).unwrap();
        let (gf_p, gw_p) = margin_softmax_backward(&fwd_p.cache);
        assert!((fwd.loss - fwd_p.loss).abs() < 1e-12);
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((gf_p.get(new_i, c) - gf.get(old_i, c)).abs() < 1e-12);
            }
        }
        for r in 0..4 {
            for j in 0..3 {
                assert!((gw_p.get(r, j) - gw.get(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_invariant_to_weight_column_rescaling() {
        let mut rng = RngStream::new(33, 1);
        let (batch, weights) = random_batch(&mut rng, 6, 5, 4);
        let cfg = config(
            LossKind::ArcSoftmax,
            MarginSet::new(1.0, 0.25, 0.0).unwrap(),
            true,
        );
        let base = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap().loss;
        let mut scaled = weights.clone();
        for r in 0..scaled.rows() {
            let v = scaled.get(r, 2) * 7.5;
            scaled.set(r, 2, v);
        }
        let re = margin_softmax_forward(&batch, &scaled, &cfg, 0).unwrap().loss;
        assert!((base - re).abs() < 1e-10);
    }

    #[test]
    fn loss_invariant_to_feature_rescaling_when_normalized() {
        let mut rng = RngStream::new(34, 1);
        let (batch, weights) = random_batch(&mut rng, 4, 5, 3);
        let cfg = config(
            LossKind::AmSoftmax,
            MarginSet::new(1.0, 0.0, 0.2).unwrap(),
            true,
        );
        let base = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap().loss;
        let mut feats = batch.features.clone();
        for c in 0..feats.cols() {
            let v = feats.get(1, c) * 0.03;
            feats.set(1, c, v);
        }
        let rebatch = Batch::new(feats, batch.labels.clone(), 3).unwrap();
        let re = margin_softmax_forward(&rebatch, &weights, &cfg, 0).unwrap().loss;
        assert!((base - re).abs() < 1e-10);
    }

    #[test]
    fn margins_never_decrease_loss() {
        let mut rng = RngStream::new(35, 2);
        for margins in crate::margins::margin_grid() {
            let kind = if margins.m1 > 1.0 {
                LossKind::ASoftmax
            } else if margins.m2 > 0.0 {
                LossKind::ArcSoftmax
            } else {
                LossKind::AmSoftmax
            };
            for _ in 0..20 {
                let (batch, weights) = random_batch(&mut rng, 6, 5, 4);
                let with = config(kind, margins, true);
                let without = config(LossKind::ModifiedSoftmax, MarginSet::trivial(), true);
                let lw = margin_softmax_forward(&batch, &weights, &with, 1_000_000_000).unwrap();
                let lo = margin_softmax_forward(&batch, &weights, &without, 0).unwrap();
                assert!(
                    lw.loss >= lo.loss - 1e-12,
                    "{margins:?}: {} < {}",
                    lw.loss,
                    lo.loss
                );
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_labels() {
        let mut rng = RngStream::new(36, 2);
        let (batch, weights) = random_batch(&mut rng, 3, 4, 3);
        let cfg = config(LossKind::ModifiedSoftmax, MarginSet::trivial(), true);
        let bad_w = Matrix::zeros(5, 3);
        assert!(margin_softmax_forward(&batch, &bad_w, &cfg, 0).is_err());
        let bad_c = Matrix::zeros(4, 7);
        assert!(margin_softmax_forward(&batch, &bad_c, &cfg, 0).is_err());
        assert!(Batch::new(batch.features.clone(), vec![0, 1, 3], 3).is_err());
        assert!(margin_softmax_forward(&batch, &weights, &cfg, 0).is_ok());
    }
}
