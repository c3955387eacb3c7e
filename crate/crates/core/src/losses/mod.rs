//! Loss family: softmax, modified softmax, the three margin variants and
//! the batch-center loss, plus the Ring and hyperspherical-energy
//! auxiliaries, composable into one total objective with exact gradients.

mod feature_norm;
mod ge2e;
mod margin_softmax;
mod mhe;
mod ring;

pub use feature_norm::{normalize_features, normalize_features_backward, FeatureNormCache};
pub use ge2e::{ge2e_loss, ge2e_loss_fixed_centers, Ge2eOutput};
pub use margin_softmax::{
    margin_softmax_backward, margin_softmax_forward, MarginSoftmaxCache, MarginSoftmaxForward,
};
pub use mhe::mhe_loss;
pub use ring::{ring_loss, RingLossOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margins::{anneal_lambda, AnnealSchedule, MarginSet};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Raw `w^T x` logits, no normalization, no margin.
    Softmax,
    /// Weight columns normalized; no margin.
    ModifiedSoftmax,
    /// Multiplicative angular margin m1.
    ASoftmax,
    /// Additive angular margin m2.
    ArcSoftmax,
    /// Additive cosine margin m3.
    AmSoftmax,
    /// Softmax over in-batch speaker centers.
    Ge2e,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::ModifiedSoftmax => "modified-softmax",
            LossKind::ASoftmax => "asoftmax",
            LossKind::ArcSoftmax => "arcsoftmax",
            LossKind::AmSoftmax => "amsoftmax",
            LossKind::Ge2e => "ge2e",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Fixed logit scale, used when features are normalized (and as the
    /// cosine scale of the batch-center loss).
    pub scale: f64,
    pub normalize_weights: bool,
    pub normalize_features: bool,
    pub margins: MarginSet,
    /// Ring loss weight; 0 disables.
    pub ring_weight: f64,
    /// Learnable target norm for the Ring loss (initial value).
    pub ring_target: f64,
    /// Hyperspherical-energy weight; 0 disables.
    pub mhe_weight: f64,
    pub anneal: AnnealSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::AmSoftmax,
            scale: 30.0,
            normalize_weights: true,
            normalize_features: false,
            margins: MarginSet { m1: 1.0, m2: 0.0, m3: 0.2 },
            ring_weight: 0.0,
            ring_target: 20.0,
            mhe_weight: 0.0,
            anneal: AnnealSchedule {
                lambda_floor: 0.0,
                lambda_base: 100.0,
                gamma: 0.02,
                alpha: 5.0,
            },
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        self.anneal.validate()?;
        if self.scale <= 0.0 {
            return Err(Error::Config("loss.scale must be positive".into()));
        }
        if self.ring_weight < 0.0 || self.mhe_weight < 0.0 {
            return Err(Error::Config("auxiliary loss weights must be >= 0".into()));
        }
        if self.ring_target <= 0.0 {
            return Err(Error::Config("loss.ring_target must be positive".into()));
        }
        if self.normalize_features && self.ring_weight > 0.0 {
            return Err(Error::Config(
                "loss.normalize_features and loss.ring_weight are mutually exclusive; \
                 the Ring loss replaces hard feature normalization"
                    .into(),
            ));
        }
        let require = |cond: bool, msg: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(format!("loss.kind = {}: {msg}", self.kind.name())))
            }
        };
        match self.kind {
            LossKind::Softmax => {
                require(self.margins.is_trivial(), "margins must be trivial")?;
                require(
                    !self.normalize_weights && !self.normalize_features,
                    "no normalization applies",
                )?;
            }
            LossKind::ModifiedSoftmax => {
                require(self.margins.is_trivial(), "margins must be trivial")?;
                require(self.normalize_weights, "weights must be normalized")?;
            }
            LossKind::ASoftmax => {
                require(self.normalize_weights, "weights must be normalized")?;
                require(
                    self.margins.m2 == 0.0 && self.margins.m3 == 0.0,
                    "only m1 may be active",
                )?;
            }
            LossKind::ArcSoftmax => {
                require(self.normalize_weights, "weights must be normalized")?;
                require(
                    self.margins.m1 == 1.0 && self.margins.m3 == 0.0,
                    "only m2 may be active",
                )?;
            }
            LossKind::AmSoftmax => {
                require(self.normalize_weights, "weights must be normalized")?;
                require(
                    self.margins.m1 == 1.0 && self.margins.m2 == 0.0,
                    "only m3 may be active",
                )?;
            }
            LossKind::Ge2e => {
                require(self.margins.is_trivial(), "margins must be trivial")?;
            }
        }
        Ok(())
    }
}

/// A batch of loss inputs: N feature rows with class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("batch must contain at least one sample".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("batch features must be finite".into()));
        }
        Ok(Batch { features, labels, n_classes })
    }
}

/// Per-batch scalars logged during training.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Diagnostics {
    pub target_logit_mean: f64,
    pub feature_norm_mean: f64,
}

/// Total objective value with gradients for everything trainable here.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Primary-term value (total minus auxiliaries), for logging.
    pub primary_loss: f64,
    pub ring_loss: f64,
    pub mhe_loss: f64,
    pub grad_features: Matrix,
    pub grad_weights: Matrix,
    pub grad_ring_target: f64,
    pub lambda: f64,
    pub diagnostics: Diagnostics,
}

/// Primary loss plus enabled auxiliaries, gradients summed. The Ring loss
/// always sees the raw pre-normalization features.
pub fn total_loss(batch: &Batch, weights: &Matrix, config: &LossConfig, step: u64) -> Result<LossOutput> {
    config.validate()?;
    let lambda = anneal_lambda(step, &config.anneal);

    let (primary, mut grad_features, mut grad_weights, diagnostics) = match config.kind {
        LossKind::Ge2e => {
            let out = ge2e_loss(batch, config.scale, 0.0)?;
            let grad_weights = Matrix::zeros(weights.rows(), weights.cols());
            (out.loss, out.grad_features, grad_weights, out.diagnostics)
        }
        _ => {
            let fwd = margin_softmax_forward(batch, weights, config, step)?;
            let (gf, gw) = margin_softmax_backward(&fwd.cache);
            (fwd.loss, gf, gw, fwd.diagnostics)
        }
    };

    let mut loss = primary;
    let mut ring_value = 0.0;
    let mut grad_ring_target = 0.0;
    if config.ring_weight > 0.0 {
        let ring = ring_loss(&batch.features, config.ring_target, config.ring_weight)?;
        loss += ring.loss;
        ring_value = ring.loss;
        grad_features.add_assign(&ring.grad_features);
        grad_ring_target = ring.grad_target;
    }
    let mut mhe_value = 0.0;
    if config.mhe_weight > 0.0 {
        let (value, grad) = mhe_loss(weights, &batch.labels, config.mhe_weight)?;
        loss += value;
        mhe_value = value;
        grad_weights.add_assign(&grad);
    }

    Ok(LossOutput {
        loss,
        primary_loss: primary,
        ring_loss: ring_value,
        mhe_loss: mhe_value,
        grad_features,
        grad_weights,
        grad_ring_target,
        lambda,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{norm, RngStream};

    fn random_batch(rng: &mut RngStream, n: usize, d: usize, c: usize) -> (Batch, Matrix) {
        let features = Matrix::from_vec(n, d, rng.draw_gaussian(n * d)).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let weights = Matrix::from_vec(d, c, rng.draw_gaussian(d * c)).unwrap();
        (Batch::new(features, labels, c).unwrap(), weights)
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.kind = LossKind::Softmax;
        assert!(cfg.validate().is_err()); // margin still set
        cfg.margins = MarginSet::trivial();
        assert!(cfg.validate().is_err()); // weights still normalized
        cfg.normalize_weights = false;
        assert!(cfg.validate().is_ok());

        let mut ring = LossConfig {
            normalize_features: true,
            ring_weight: 0.01,
            ..LossConfig::default()
        };
        assert!(ring.validate().is_err());
        ring.normalize_features = false;
        assert!(ring.validate().is_ok());

        let arc = LossConfig {
            kind: LossKind::ArcSoftmax,
            margins: MarginSet { m1: 1.0, m2: 0.2, m3: 0.1 },
            ..LossConfig::default()
        };
        assert!(arc.validate().is_err());
    }

    #[test]
    fn total_equals_primary_when_auxiliaries_off() {
        let mut rng = RngStream::new(40, 1);
        let (batch, weights) = random_batch(&mut rng, 8, 5, 4);
        let cfg = LossConfig::default();
        let total = total_loss(&batch, &weights, &cfg, 3).unwrap();
        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 3).unwrap();
        assert_eq!(total.loss.to_bits(), fwd.loss.to_bits());
        assert_eq!(total.ring_loss, 0.0);
        assert_eq!(total.mhe_loss, 0.0);
    }

    #[test]
    fn gradients_sum_component_wise() {
        let mut rng = RngStream::new(41, 1);
        let (batch, weights) = random_batch(&mut rng, 8, 5, 4);
        let cfg = LossConfig {
            ring_weight: 0.01,
            mhe_weight: 0.01,
            ..LossConfig::default()
        };
        let total = total_loss(&batch, &weights, &cfg, 3).unwrap();

        let fwd = margin_softmax_forward(&batch, &weights, &cfg, 3).unwrap();
        let (mut gf, mut gw) = margin_softmax_backward(&fwd.cache);
        let ring = ring_loss(&batch.features, cfg.ring_target, cfg.ring_weight).unwrap();
        gf.add_assign(&ring.grad_features);
        let (mhe_value, mhe_grad) = mhe_loss(&weights, &batch.labels, cfg.mhe_weight).unwrap();
        gw.add_assign(&mhe_grad);

        assert_eq!(total.grad_features, gf);
        assert_eq!(total.grad_weights, gw);
        assert_eq!(
            total.loss.to_bits(),
            (fwd.loss + ring.loss + mhe_value).to_bits()
        );
        assert_eq!(total.grad_ring_target.to_bits(), ring.grad_target.to_bits());
    }

    #[test]
    fn ge2e_with_weight_centers_reduces_to_modified_softmax() {
        let mut rng = RngStream::new(42, 1);
        for _ in 0..30 {
            let (batch, weights) = random_batch(&mut rng, 6, 5, 4);
            // Centers are the weight columns, one row per class.
            let mut centers = Matrix::zeros(4, 5);
            for j in 0..4 {
                for r in 0..5 {
                    centers.set(j, r, weights.get(r, j));
                }
            }
            let ge2e = ge2e_loss_fixed_centers(&batch, &centers, 4.0, 0.0).unwrap();
            let cfg = LossConfig {
                kind: LossKind::ModifiedSoftmax,
                margins: MarginSet::trivial(),
                scale: 4.0,
                normalize_features: true,
                ..LossConfig::default()
            };
            let msm = margin_softmax_forward(&batch, &weights, &cfg, 0).unwrap();
            assert!(
                (ge2e.loss - msm.loss).abs() < 1e-12,
                "{} vs {}",
                ge2e.loss,
                msm.loss
            );
        }
    }

    #[test]
    fn label_permutation_of_nontarget_columns_preserves_loss() {
        // Swapping two non-target weight columns (and relabeling nothing)
        // cannot change any per-sample loss term.
        let mut rng = RngStream::new(43, 1);
        for kind in [
            LossKind::Softmax,
            LossKind::ModifiedSoftmax,
            LossKind::AmSoftmax,
        ] {
            let (mut batch, weights) = random_batch(&mut rng, 5, 4, 4);
            batch.labels = vec![0; 5];
            let cfg = match kind {
                LossKind::Softmax => LossConfig {
                    kind,
                    margins: MarginSet::trivial(),
                    normalize_weights: false,
                    ..LossConfig::default()
                },
                LossKind::ModifiedSoftmax => LossConfig {
                    kind,
                    margins: MarginSet::trivial(),
                    ..LossConfig::default()
                },
                _ => LossConfig { kind, ..LossConfig::default() },
            };
            let base = total_loss(&batch, &weights, &cfg, 0).unwrap().loss;
            let mut swapped = weights.clone();
            for r in 0..swapped.rows() {
                let (a, b) = (swapped.get(r, 2), swapped.get(r, 3));
                swapped.set(r, 2, b);
                swapped.set(r, 3, a);
            }
            let re = total_loss(&batch, &swapped, &cfg, 0).unwrap().loss;
            assert!((base - re).abs() < 1e-12, "{kind:?}");
        }
    }

    /// Toy A/B: optimize the features (and weights) directly by SGD and
    /// confirm the Ring loss tightens the norm distribution.
    #[test]
    fn ring_loss_shrinks_norm_variance_in_toy_descent() {
        let run = |ring_weight: f64| -> f64 {
            let mut rng = RngStream::new(44, 1);
            let mut features = Matrix::from_vec(16, 6, rng.draw_gaussian(96)).unwrap();
            features.scale(3.0);
            let mut weights = Matrix::from_vec(6, 4, rng.draw_gaussian(24)).unwrap();
            let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
            let cfg = LossConfig {
                ring_weight,
                ring_target: 4.0,
                anneal: AnnealSchedule::disabled(),
                ..LossConfig::default()
            };
            let mut target = cfg.ring_target;
            for step in 0..200 {
                let mut cfg_step = cfg;
                cfg_step.ring_target = target;
                let batch = Batch::new(features.clone(), labels.clone(), 4).unwrap();
                let out = total_loss(&batch, &weights, &cfg_step, step).unwrap();
                for (v, g) in features.data_mut().iter_mut().zip(out.grad_features.data()) {
                    *v -= 0.5 * g;
                }
                for (v, g) in weights.data_mut().iter_mut().zip(out.grad_weights.data()) {
                    *v -= 0.5 * g;
                }
                target -= 0.5 * out.grad_ring_target;
            }
            let norms: Vec<f64> = (0..16).map(|i| norm(features.row(i))).collect();
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / norms.len() as f64
        };
        let with_ring = run(0.01);
        let without = run(0.0);
        assert!(
            with_ring < without,
            "ring variance {with_ring} not below baseline {without}"
        );
    }

    /// Toy A/B: with fixed features, descending on the weights alone, the
    /// energy term tightens the pairwise weight distances.
    #[test]
    fn mhe_shrinks_weight_distance_variance_in_toy_descent() {
        let run = |mhe_weight: f64| -> f64 {
            let mut rng = RngStream::new(45, 1);
            let features = Matrix::from_vec(20, 6, rng.draw_gaussian(120)).unwrap();
            let mut weights = Matrix::from_vec(6, 5, rng.draw_gaussian(30)).unwrap();
            let labels: Vec<usize> = (0..20).map(|i| i % 5).collect();
            let cfg = LossConfig {
                mhe_weight,
                anneal: AnnealSchedule::disabled(),
                ..LossConfig::default()
            };
            let batch = Batch::new(features, labels, 5).unwrap();
            for step in 0..800 {
                let out = total_loss(&batch, &weights, &cfg, step).unwrap();
                for (v, g) in weights.data_mut().iter_mut().zip(out.grad_weights.data()) {
                    *v -= 0.3 * g;
                }
            }
            // Population variance of pairwise squared distances between
            // normalized columns.
            let mut dists = Vec::new();
            for a in 0..5 {
                for b in (a + 1)..5 {
                    let ca = weights.col(a);
                    let cb = weights.col(b);
                    let (na, nb) = (norm(&ca), norm(&cb));
                    let d2: f64 = ca
                        .iter()
                        .zip(&cb)
                        .map(|(x, y)| (x / na - y / nb) * (x / na - y / nb))
                        .sum();
                    dists.push(d2);
                }
            }
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dists.len() as f64
        };
        let with_mhe = run(0.01);
        let without = run(0.0);
        assert!(
            with_mhe < without,
            "mhe variance {with_mhe} not below baseline {without}"
        );
    }
}
