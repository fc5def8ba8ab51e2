//! Small parameterized layers shared by the attention ops and the backbone.
//!
//! Initialization policy: truncated normal (std 0.02, cut at two sigma) for
//! every projection/conv weight, zeros for biases, ones/zeros for norm
//! affine parameters.

use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Visitor over named parameters; used for counting, optimization,
/// serialization, and gradient checks.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &Tensor<T>) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b` on the last axis. Weight is `[in, out]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = rng.trunc_normal::<T>(&[d_in, d_out], INIT_STD);
        mark_param(&weight);
        let bias = bias.then(|| {
            let b = Tensor::zeros(&[d_out]);
            mark_param(&b);
            b
        });
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Layer norm parameters over a fixed channel count.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(dim: usize) -> Self {
        let gamma = Tensor::ones(&[dim]);
        let beta = Tensor::zeros(&[dim]);
        mark_param(&gamma);
        mark_param(&beta);
        LayerNorm {
            gamma,
            beta,
            eps: LN_EPS,
        }
    }

    /// Normalize the last axis.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    /// Normalize the channel axis of a `[B, C, H, W]` map.
    pub fn forward_channels(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.permute(&[0, 2, 3, 1])?;
        let y = self.forward(&y)?;
        y.permute(&[0, 3, 1, 2])
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
}

/// Convolution layer: weight `[Co, Ci/g, k, k]`, optional bias, geometry.
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn init(
        rng: &mut Rng,
        c_out: usize,
        c_in_per_group: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let weight = rng.trunc_normal::<T>(&[c_out, c_in_per_group, kernel, kernel], INIT_STD);
        mark_param(&weight);
        let bias = bias.then(|| {
            let b = Tensor::zeros(&[c_out]);
            mark_param(&b);
            b
        });
        Conv2dLayer { weight, bias, spec }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.conv2d(&self.weight, self.spec)?;
        match &self.bias {
            Some(b) => {
                let co = b.numel();
                y.add(&b.reshape(&[co, 1, 1])?)
            }
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Turn a freshly built tensor into a trainable leaf in place.
pub(crate) fn mark_param<T: Scalar>(t: &Tensor<T>) {
    t.make_param();
}
