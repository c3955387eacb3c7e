//! The embedding network: a stack of valid temporal convolutions over
//! frames, statistics pooling, and fully-connected segment layers. Hidden
//! layers are affine + batchnorm + ReLU (order configurable); the last
//! segment layer drops its ReLU by default so features can span the whole
//! space rather than the nonnegative orthant.

mod checkpoint;
mod layers;
mod trainer;

pub use checkpoint::{checkpoint_load, checkpoint_save, TrainState};
pub use layers::{
    bn_backward, bn_forward_eval, bn_forward_train, relu_backward, relu_forward, stats_pool,
    stats_pool_backward, BatchNorm, BnCache, ConvLayer, DenseLayer, PoolCache, BN_EPS,
    BN_MOMENTUM, POOL_VAR_FLOOR,
};
pub use trainer::{
    plateau_scheduler_step, sample_batch, sgd_apply, PlateauScheduler, SegmentBatch, TrainConfig,
    Trainer, TrainLogRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};
use crate::par;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub frame_kernel_sizes: Vec<usize>,
    pub frame_widths: Vec<usize>,
    pub segment_widths: Vec<usize>,
    pub num_classes: usize,
    /// Which segment layer's output is extracted as the embedding.
    pub embedding_layer_index: usize,
    pub use_batchnorm: bool,
    pub remove_last_relu: bool,
    pub bn_before_relu: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 10,
            frame_kernel_sizes: vec![5, 5, 7, 1, 1],
            frame_widths: vec![32, 32, 32, 32, 32],
            segment_widths: vec![64, 64],
            num_classes: 20,
            embedding_layer_index: 1,
            use_batchnorm: true,
            remove_last_relu: true,
            bn_before_relu: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("network.input_dim must be >= 1".into()));
        }
        if self.frame_kernel_sizes.is_empty() {
            return Err(Error::Config("network needs at least one frame layer".into()));
        }
        if self.frame_kernel_sizes.len() != self.frame_widths.len() {
            return Err(Error::Config(format!(
                "{} kernel sizes but {} frame widths",
                self.frame_kernel_sizes.len(),
                self.frame_widths.len()
            )));
        }
        for &k in &self.frame_kernel_sizes {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!(
                    "kernel sizes must be odd and positive, got {k}"
                )));
            }
        }
        if self.frame_widths.iter().chain(&self.segment_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.segment_widths.is_empty() {
            return Err(Error::Config("network needs at least one segment layer".into()));
        }
        if self.embedding_layer_index >= self.segment_widths.len() {
            return Err(Error::Config(format!(
                "embedding_layer_index {} out of range for {} segment layers",
                self.embedding_layer_index,
                self.segment_widths.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("network.num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Total temporal footprint of the convolution stack.
    pub fn receptive_field(&self) -> usize {
        self.frame_kernel_sizes.iter().map(|k| k - 1).sum::<usize>() + 1
    }

    /// Shortest segment the network accepts (pooling needs 2 frames).
    pub fn min_input_frames(&self) -> usize {
        self.receptive_field() + 1
    }

    /// Dimension of the loss-input feature (last segment layer).
    pub fn feature_dim(&self) -> usize {
        *self.segment_widths.last().unwrap()
    }

    pub fn embedding_dim(&self) -> usize {
        self.segment_widths[self.embedding_layer_index]
    }
}

/// A hidden block: affine component plus optional batchnorm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub dense: DenseLayer,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub config: NetworkConfig,
    pub frame_blocks: Vec<ConvBlock>,
    pub segment_blocks: Vec<DenseBlock>,
    /// Output-layer weights, `feature_dim x num_classes`; the loss consumes
    /// them directly, the network forward stops at the feature.
    pub output_weights: Matrix,
    /// Learnable Ring-loss target norm.
    pub ring_target: f64,
}

impl EmbeddingNet {
    /// Kaiming fan-in initialization from the given stream; biases zero,
    /// batchnorm at identity.
    pub fn new(config: NetworkConfig, ring_target: f64, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut frame_blocks = Vec::new();
        let mut in_dim = config.input_dim;
        for (l, (&k, &w)) in config
            .frame_kernel_sizes
            .iter()
            .zip(&config.frame_widths)
            .enumerate()
        {
            let fan_in = k * in_dim;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Matrix::from_vec(
                w,
                fan_in,
                rng.draw_gaussian(w * fan_in).into_iter().map(|v| v * std).collect(),
            )?;
            let _ = l;
            frame_blocks.push(ConvBlock {
                conv: ConvLayer { weight, bias: vec![0.0; w], kernel: k, in_dim, out_dim: w },
                bn: config.use_batchnorm.then(|| BatchNorm::new(w)),
                relu: true,
            });
            in_dim = w;
        }
        let mut segment_blocks = Vec::new();
        let mut dim = 2 * in_dim;
        let last = config.segment_widths.len() - 1;
        for (l, &w) in config.segment_widths.iter().enumerate() {
            let std = (2.0 / dim as f64).sqrt();
            let weight = Matrix::from_vec(
                w,
                dim,
                rng.draw_gaussian(w * dim).into_iter().map(|v| v * std).collect(),
            )?;
            segment_blocks.push(DenseBlock {
                dense: DenseLayer { weight, bias: vec![0.0; w] },
                bn: config.use_batchnorm.then(|| BatchNorm::new(w)),
                relu: !(l == last && config.remove_last_relu),
            });
            dim = w;
        }
        let feat_dim = config.feature_dim();
        let std = (1.0 / feat_dim as f64).sqrt();
        let output_weights = Matrix::from_vec(
            feat_dim,
            config.num_classes,
            rng.draw_gaussian(feat_dim * config.num_classes)
                .into_iter()
                .map(|v| v * std)
                .collect(),
        )?;
        Ok(EmbeddingNet { config, frame_blocks, segment_blocks, output_weights, ring_target })
    }

    fn check_segments(&self, segments: &[Matrix]) -> Result<()> {
        if segments.is_empty() {
            return Err(Error::Shape("forward pass needs at least one segment".into()));
        }
        let min = self.config.min_input_frames();
        for (i, seg) in segments.iter().enumerate() {
            if seg.cols() != self.config.input_dim {
                return Err(Error::Shape(format!(
                    "segment {i} has dimension {} but the network expects {}",
                    seg.cols(),
                    self.config.input_dim
                )));
            }
            if seg.rows() < min {
                return Err(Error::Shape(format!(
                    "segment {i} has {} frames but the network needs at least {min}",
                    seg.rows()
                )));
            }
        }
        Ok(())
    }

    /// Train-mode batched forward. Batchnorm statistics pool over the whole
    /// batch (all frames at frame level, all segments at segment level) and
    /// running statistics are updated in place.
    pub fn forward_train(&mut self, segments: &[Matrix]) -> Result<(Matrix, TrainCache)> {
        self.check_segments(segments)?;
        let n = segments.len();
        let mut cur: Vec<Matrix> = segments.to_vec();
        let mut frame_caches = Vec::with_capacity(self.frame_blocks.len());
        for block in &mut self.frame_blocks {
            let inputs = cur;
            cur = par::map_slice(&inputs, |seg| block.conv.forward(seg));
            let mut bn_cache = None;
            let mut relu_input = Vec::new();
            let mut relu_masks = Vec::new();
            if self.config.bn_before_relu {
                if let Some(bn) = block.bn.as_mut() {
                    bn_cache = Some(bn_forward_train(bn, &mut cur));
                }
                if block.relu {
                    relu_input = cur.clone();
                    relu_masks = cur.iter_mut().map(relu_forward).collect();
                }
            } else {
                if block.relu {
                    relu_input = cur.clone();
                    relu_masks = cur.iter_mut().map(relu_forward).collect();
                }
                if let Some(bn) = block.bn.as_mut() {
                    bn_cache = Some(bn_forward_train(bn, &mut cur));
                }
            }
            let _ = relu_input;
            frame_caches.push(FrameLayerCache { inputs, bn: bn_cache, relu_masks });
        }

        let mut pooled = Matrix::zeros(n, 2 * cur[0].cols());
        let mut pool_caches = Vec::with_capacity(n);
        let pool_results = par::map_slice(&cur, |seg| stats_pool(seg));
        for (i, res) in pool_results.into_iter().enumerate() {
            let (row, cache) = res?;
            pooled.row_mut(i).copy_from_slice(&row);
            pool_caches.push(cache);
        }
        let frame_outputs = cur;

        let mut seg_cur = pooled;
        let mut segment_caches = Vec::with_capacity(self.segment_blocks.len());
        for block in &mut self.segment_blocks {
            let input = seg_cur;
            seg_cur = block.dense.forward(&input);
            let mut bn_cache = None;
            let mut relu_mask = Vec::new();
            if self.config.bn_before_relu {
                if let Some(bn) = block.bn.as_mut() {
                    let mut holder = [seg_cur];
                    bn_cache = Some(bn_forward_train(bn, &mut holder));
                    [seg_cur] = holder;
                }
                if block.relu {
                    relu_mask = relu_forward(&mut seg_cur);
                }
            } else {
                if block.relu {
                    relu_mask = relu_forward(&mut seg_cur);
                }
                if let Some(bn) = block.bn.as_mut() {
                    let mut holder = [seg_cur];
                    bn_cache = Some(bn_forward_train(bn, &mut holder));
                    [seg_cur] = holder;
                }
            }
            segment_caches.push(SegmentLayerCache { input, bn: bn_cache, relu_mask });
        }

        let features = seg_cur;
        Ok((
            features,
            TrainCache { frame_caches, frame_outputs, pool_caches, segment_caches },
        ))
    }

    /// Eval-mode forward with frozen batchnorm statistics. Returns the
    /// loss-input features and the configured embedding layer outputs.
    pub fn forward_eval(&self, segments: &[Matrix]) -> Result<EvalOutput> {
        self.check_segments(segments)?;
        let n = segments.len();
        let frame_out: Vec<Result<Matrix>> = par::map_slice(segments, |seg| {
            let mut cur = seg.clone();
            for block in &self.frame_blocks {
                cur = block.conv.forward(&cur);
                let mut holder = [cur];
                if self.config.bn_before_relu {
                    if let Some(bn) = &block.bn {
                        bn_forward_eval(bn, &mut holder);
                    }
                    if block.relu {
                        relu_forward(&mut holder[0]);
                    }
                } else {
                    if block.relu {
                        relu_forward(&mut holder[0]);
                    }
                    if let Some(bn) = &block.bn {
                        bn_forward_eval(bn, &mut holder);
                    }
                }
                [cur] = holder;
            }
            Ok(cur)
        });
        let mut pooled = Matrix::zeros(n, 2 * self.frame_blocks.last().unwrap().conv.out_dim);
        for (i, res) in frame_out.into_iter().enumerate() {
            let (row, _) = stats_pool(&res?)?;
            pooled.row_mut(i).copy_from_slice(&row);
        }

        let mut cur = pooled;
        let mut embeddings = None;
        for (l, block) in self.segment_blocks.iter().enumerate() {
            cur = block.dense.forward(&cur);
            let mut holder = [cur];
            if self.config.bn_before_relu {
                if let Some(bn) = &block.bn {
                    bn_forward_eval(bn, &mut holder);
                }
                if block.relu {
                    relu_forward(&mut holder[0]);
                }
            } else {
                if block.relu {
                    relu_forward(&mut holder[0]);
                }
                if let Some(bn) = &block.bn {
                    bn_forward_eval(bn, &mut holder);
                }
            }
            [cur] = holder;
            if l == self.config.embedding_layer_index {
                embeddings = Some(cur.clone());
            }
        }
        Ok(EvalOutput { features: cur, embeddings: embeddings.expect("index validated") })
    }

    /// Embeds one utterance (eval mode).
    pub fn embed(&self, segment: &Matrix) -> Result<Vec<f64>> {
        let out = self.forward_eval(std::slice::from_ref(segment))?;
        Ok(out.embeddings.row(0).to_vec())
    }

    /// Backward through the whole network given the gradient on the
    /// features. Must be paired with the matching `forward_train` cache.
    pub fn backward(&self, cache: &TrainCache, grad_features: &Matrix) -> NetGradients {
        let mut grads = NetGradients::zeros_like(self);

        let mut g = grad_features.clone();
        for (l, block) in self.segment_blocks.iter().enumerate().rev() {
            let layer_cache = &cache.segment_caches[l];
            if self.config.bn_before_relu {
                if block.relu {
                    relu_backward(&mut g, &layer_cache.relu_mask);
                }
                if let Some(bn) = &block.bn {
                    let mut holder = [g];
                    let (ggamma, gbeta) =
                        bn_backward(bn, layer_cache.bn.as_ref().unwrap(), &mut holder);
                    [g] = holder;
                    grads.segment[l].gamma = ggamma;
                    grads.segment[l].beta = gbeta;
                }
            } else {
                if let Some(bn) = &block.bn {
                    let mut holder = [g];
                    let (ggamma, gbeta) =
                        bn_backward(bn, layer_cache.bn.as_ref().unwrap(), &mut holder);
                    [g] = holder;
                    grads.segment[l].gamma = ggamma;
                    grads.segment[l].beta = gbeta;
                }
                if block.relu {
                    relu_backward(&mut g, &layer_cache.relu_mask);
                }
            }
            let (gi, gw, gb) = block.dense.backward(&layer_cache.input, &g);
            grads.segment[l].weight = gw;
            grads.segment[l].bias = gb;
            g = gi;
        }

        // Unstack pooled gradients per segment.
        let n = g.rows();
        let mut frame_grads: Vec<Matrix> = (0..n)
            .map(|i| {
                stats_pool_backward(&cache.frame_outputs[i], &cache.pool_caches[i], g.row(i))
            })
            .collect();

        for (l, block) in self.frame_blocks.iter().enumerate().rev() {
            let layer_cache = &cache.frame_caches[l];
            if self.config.bn_before_relu {
                if block.relu {
                    for (gm, mask) in frame_grads.iter_mut().zip(&layer_cache.relu_masks) {
                        relu_backward(gm, mask);
                    }
                }
                if let Some(bn) = &block.bn {
                    let (ggamma, gbeta) =
                        bn_backward(bn, layer_cache.bn.as_ref().unwrap(), &mut frame_grads);
                    grads.frame[l].gamma = ggamma;
                    grads.frame[l].beta = gbeta;
                }
            } else {
                if let Some(bn) = &block.bn {
                    let (ggamma, gbeta) =
                        bn_backward(bn, layer_cache.bn.as_ref().unwrap(), &mut frame_grads);
                    grads.frame[l].gamma = ggamma;
                    grads.frame[l].beta = gbeta;
                }
                if block.relu {
                    for (gm, mask) in frame_grads.iter_mut().zip(&layer_cache.relu_masks) {
                        relu_backward(gm, mask);
                    }
                }
            }
            // Per-segment conv backward in parallel, partial weight grads
            // summed in segment order.
            let parts: Vec<(Matrix, Matrix, Vec<f64>)> =
                par::map_range(frame_grads.len(), |i| {
                    block.conv.backward(&layer_cache.inputs[i], &frame_grads[i])
                });
            let mut next = Vec::with_capacity(parts.len());
            for (gi, gw, gb) in parts {
                grads.frame[l].weight.add_assign(&gw);
                for (acc, v) in grads.frame[l].bias.iter_mut().zip(&gb) {
                    *acc += v;
                }
                next.push(gi);
            }
            frame_grads = next;
        }
        grads
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub features: Matrix,
    pub embeddings: Matrix,
}

#[derive(Debug, Clone)]
struct FrameLayerCache {
    inputs: Vec<Matrix>,
    bn: Option<BnCache>,
    relu_masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
struct SegmentLayerCache {
    input: Matrix,
    bn: Option<BnCache>,
    relu_mask: Vec<bool>,
}

/// Everything the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct TrainCache {
    frame_caches: Vec<FrameLayerCache>,
    frame_outputs: Vec<Matrix>,
    pool_caches: Vec<PoolCache>,
    segment_caches: Vec<SegmentLayerCache>,
}

/// Parameter gradients mirroring [`EmbeddingNet`].
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub frame: Vec<BlockGrads>,
    pub segment: Vec<BlockGrads>,
    pub output_weights: Matrix,
    pub ring_target: f64,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NetGradients {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        let frame = net
            .frame_blocks
            .iter()
            .map(|b| BlockGrads {
                weight: Matrix::zeros(b.conv.weight.rows(), b.conv.weight.cols()),
                bias: vec![0.0; b.conv.bias.len()],
                gamma: vec![0.0; b.bn.as_ref().map_or(0, BatchNorm::dim)],
                beta: vec![0.0; b.bn.as_ref().map_or(0, BatchNorm::dim)],
            })
            .collect();
        let segment = net
            .segment_blocks
            .iter()
            .map(|b| BlockGrads {
                weight: Matrix::zeros(b.dense.weight.rows(), b.dense.weight.cols()),
                bias: vec![0.0; b.dense.bias.len()],
                gamma: vec![0.0; b.bn.as_ref().map_or(0, BatchNorm::dim)],
                beta: vec![0.0; b.bn.as_ref().map_or(0, BatchNorm::dim)],
            })
            .collect();
        NetGradients {
            frame,
            segment,
            output_weights: Matrix::zeros(net.output_weights.rows(), net.output_weights.cols()),
            ring_target: 0.0,
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in self.frame.iter_mut().chain(self.segment.iter_mut()) {
            b.weight.scale(k);
            for v in b.bias.iter_mut().chain(b.gamma.iter_mut()).chain(b.beta.iter_mut()) {
                *v *= k;
            }
        }
        self.output_weights.scale(k);
        self.ring_target *= k;
    }
}
