//! Coordinator lifecycle: generation from stage-2 features, cross-stage
//! compression, and the anchor regularizer.
//!
//! The generator runs exactly once per forward, on the feature map right
//! after the stage-1 downsample (1/8 resolution). Channel (SE) and spatial
//! (SA) gates are applied to the features jointly — `x ⊙ g_ch ⊙ g_sp`,
//! one application of each gate — then global average pooling and a
//! two-layer MLP expand the pooled vector into `K` coordinators.

use crate::error::{Error, Result};
use crate::layers::{join, Conv2dLayer, Linear, ParamVisitor};
use crate::ops::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Squeeze-and-excitation gate: pooled statistics through a bottleneck MLP
/// to a per-channel sigmoid gate.
pub struct SeWeights<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> SeWeights<T> {
    /// `channels` must be divisible by `reduction`.
    pub fn init(rng: &mut Rng, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SE channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(SeWeights {
            fc1: Linear::init(rng, channels, channels / reduction, true),
            fc2: Linear::init(rng, channels / reduction, channels, true),
        })
    }

    /// `[B, C, H, W]` -> gate `[B, C, 1, 1]` in (0, 1).
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let (b, c) = (shape[0], shape[1]);
        let pooled = x.global_avg_pool()?; // [B, C]
        let z = self.fc2.forward(&self.fc1.forward(&pooled)?.gelu()?)?;
        z.sigmoid()?.reshape(&[b, c, 1, 1])
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Recalibrate channels: `x ⊙ se_gate(x)`.
pub fn se_recalibrate<T: Scalar>(x: &Tensor<T>, weights: &SeWeights<T>) -> Result<Tensor<T>> {
    x.mul(&weights.gate(x)?)
}

/// Spatial attention gate: 7×7 conv over stacked channel-mean/channel-max
/// maps to a per-position sigmoid gate.
pub struct SaWeights<T: Scalar> {
    pub conv: Conv2dLayer<T>,
}

impl<T: Scalar> SaWeights<T> {
    pub fn init(rng: &mut Rng, kernel: usize) -> Self {
        SaWeights {
            conv: Conv2dLayer::init(
                rng,
                1,
                2,
                kernel,
                Conv2dSpec {
                    stride: 1,
                    padding: kernel / 2,
                    groups: 1,
                },
                true,
            ),
        }
    }

    /// `[B, C, H, W]` -> gate `[B, 1, H, W]` in (0, 1).
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let mean_map = x.mean_axis(1)?.reshape(&[b, 1, h, w])?;
        let max_map = x.max_axis(1)?.reshape(&[b, 1, h, w])?;
        let stacked = Tensor::concat(&[&mean_map, &max_map], 1)?;
        self.conv.forward(&stacked)?.sigmoid()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
}

/// Highlight structural regions: `x ⊙ sa_gate(x)`.
pub fn spatial_gate<T: Scalar>(x: &Tensor<T>, weights: &SaWeights<T>) -> Result<Tensor<T>> {
    x.mul(&weights.gate(x)?)
}

/// Coordinator generator: SE and SA gates in parallel, fused by
/// elementwise multiplication, pooled, expanded to `K·D` by a 2-layer MLP.
pub struct GeneratorWeights<T: Scalar> {
    pub se: SeWeights<T>,
    pub sa: SaWeights<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub coordinators: usize,
    pub dim: usize,
}

pub const SE_REDUCTION: usize = 4;
pub const SA_KERNEL: usize = 7;
pub const GENERATOR_HIDDEN_FACTOR: usize = 2;

impl<T: Scalar> GeneratorWeights<T> {
    pub fn init(rng: &mut Rng, channels: usize, coordinators: usize) -> Result<Self> {
        let hidden = GENERATOR_HIDDEN_FACTOR * channels;
        Ok(GeneratorWeights {
            se: SeWeights::init(rng, channels, SE_REDUCTION)?,
            sa: SaWeights::init(rng, SA_KERNEL),
            fc1: Linear::init(rng, channels, hidden, true),
            fc2: Linear::init(rng, hidden, coordinators * channels, true),
            coordinators,
            dim: channels,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.se.visit(&join(prefix, "se"), f);
        self.sa.visit(&join(prefix, "sa"), f);
        self.fc1.visit(&join(prefix, "mlp_fc1"), f);
        self.fc2.visit(&join(prefix, "mlp_fc2"), f);
    }
}

/// `[B, C, H, W]` stage-2 input features -> coordinators `[B, K, C]`.
pub fn generate_coordinators<T: Scalar>(
    features: &Tensor<T>,
    weights: &GeneratorWeights<T>,
) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() != 4 || shape[1] != weights.dim {
        return Err(Error::Config(format!(
            "generator expects [B, {}, H, W], got {shape:?}",
            weights.dim
        )));
    }
    let b = shape[0];
    let ch_gate = weights.se.gate(features)?;
    let sp_gate = weights.sa.gate(features)?;
    let fused = features.mul(&ch_gate)?.mul(&sp_gate)?;
    let pooled = fused.global_avg_pool()?; // [B, C]
    let g = weights.fc2.forward(&weights.fc1.forward(&pooled)?.gelu()?)?;
    g.reshape(&[b, weights.coordinators, weights.dim])
}

/// Cross-stage coordinator compression: a learnable query bank cross-attends
/// over the incoming coordinators (keys/values projected to the new width),
/// plus a linear residual of the inputs. `K` never changes.
pub struct TokenMergeWeights<T: Scalar> {
    pub queries: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub residual: Tensor<T>,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl<T: Scalar> TokenMergeWeights<T> {
    pub fn init(rng: &mut Rng, coordinators: usize, dim_in: usize, dim_out: usize) -> Self {
        let std = crate::layers::INIT_STD;
        let queries = rng.trunc_normal::<T>(&[coordinators, dim_out], std);
        let wk = rng.trunc_normal::<T>(&[dim_in, dim_out], std);
        let wv = rng.trunc_normal::<T>(&[dim_in, dim_out], std);
        let residual = rng.trunc_normal::<T>(&[dim_in, dim_out], std);
        for t in [&queries, &wk, &wv, &residual] {
            t.make_param();
        }
        TokenMergeWeights {
            queries,
            wk,
            wv,
            residual,
            dim_in,
            dim_out,
        }
    }

    /// Attention path only (no residual); permutation-invariant in the
    /// input coordinator order.
    pub fn attention_path(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let k = coords.matmul(&self.wk)?; // [B, K, Do]
        let v = coords.matmul(&self.wv)?;
        let scale = T::from_f64(1.0 / (self.dim_out as f64).sqrt());
        let scores = self.queries.matmul(&k.transpose_last()?)?.scale(scale)?; // [B, K, K]
        scores.softmax_rows()?.matmul(&v)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "queries"), &self.queries);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "residual"), &self.residual);
    }
}

/// `[B, K, D_in]` -> `[B, K, D_out]` through the merge block.
pub fn token_merge<T: Scalar>(
    coords: &Tensor<T>,
    weights: &TokenMergeWeights<T>,
) -> Result<Tensor<T>> {
    let shape = coords.shape();
    if shape.len() != 3 || shape[2] != weights.dim_in {
        return Err(Error::Config(format!(
            "token_merge expects [B, K, {}], got {shape:?}",
            weights.dim_in
        )));
    }
    if shape[1] != weights.queries.dim(0) {
        return Err(Error::Config(format!(
            "token_merge K mismatch: {} coordinators vs {} queries",
            shape[1],
            weights.queries.dim(0)
        )));
    }
    let attn = weights.attention_path(coords)?;
    attn.add(&coords.matmul(&weights.residual)?)
}

/// Anchor-loss terms. `total = 0.5·diversity + 0.1·stability`, formed as a
/// single expression from the two terms.
pub struct AnchorLossTerms<T: Scalar> {
    pub diversity: Tensor<T>,
    pub stability: Tensor<T>,
    pub total: Tensor<T>,
}

pub const ANCHOR_DIVERSITY_WEIGHT: f64 = 0.5;
pub const ANCHOR_STABILITY_WEIGHT: f64 = 0.1;

/// Diversity: squared Frobenius distance between the K×K Gram matrix of
/// L2-row-normalized coordinators and the identity, batch-averaged.
/// Stability: squared Frobenius distance of each sample's coordinators
/// from the batch-wise mean, batch-averaged.
pub fn anchor_loss<T: Scalar>(coords: &Tensor<T>) -> Result<AnchorLossTerms<T>> {
    let shape = coords.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::BadShape {
            op: "anchor_loss",
            shape,
            detail: "expects [B, K, D] with B >= 1".to_string(),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let inv_b = T::one() / T::from_f64(b as f64);

    // unit rows keep the exact zero at orthonormal coordinates, so no eps
    let normed = coords.l2_normalize_rows(0.0)?;
    let gram = normed.matmul(&normed.transpose_last()?)?; // [B, K, K]
    let mut eye = vec![T::zero(); k * k];
    for i in 0..k {
        eye[i * k + i] = T::one();
    }
    let eye = Tensor::from_vec(eye, &[k, k])?;
    let diff = gram.sub(&eye)?;
    let diversity = diff.mul(&diff)?.sum_all()?.scale(inv_b)?;

    let mean = coords.mean_axis(0)?; // [K, D]
    let dev = coords.sub(&mean)?;
    let stability = dev.mul(&dev)?.sum_all()?.scale(inv_b)?;

    let total = diversity
        .scale(T::from_f64(ANCHOR_DIVERSITY_WEIGHT))?
        .add(&stability.scale(T::from_f64(ANCHOR_STABILITY_WEIGHT))?)?;
    Ok(AnchorLossTerms {
        diversity,
        stability,
        total,
    })
}
