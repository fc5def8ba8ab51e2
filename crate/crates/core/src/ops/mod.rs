//! Differentiable operation set.
//!
//! The set is closed and enumerated: matmul, conv2d, softmax (optionally
//! key-masked), layer norm, row L2-normalization, GELU, sigmoid,
//! broadcasting add/sub/mul, scalar scaling, reductions and pooling, shape
//! movement (reshape/permute/concat/narrow/pad/broadcast/gather), and a
//! fused cross-entropy loss. Everything else in the model is composed from
//! these.

mod activation;
mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod reduce;
mod shape;
mod softmax;

pub use conv::{conv_out_extent, Conv2dSpec};
pub use softmax::KeyMask;

use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (aligned from the right).
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to rank
/// `out_rank`; broadcast dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let own = crate::tensor::strides_of(shape);
    for (i, (&dim, &st)) in shape.iter().zip(own.iter()).enumerate() {
        strides[offset + i] = if dim == 1 { 0 } else { st };
    }
    strides
}

/// Sum `grad` (laid out as `grad_shape`) down to `target_shape`,
/// reversing a broadcast.
pub(crate) fn reduce_to_shape<T: crate::Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); target_numel];
    let rank = grad_shape.len();
    let read = broadcast_strides(target_shape, rank);
    let mut coords = vec![0usize; rank];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut idx = 0usize;
        for d in 0..rank {
            idx += coords[d] * read[d];
        }
        out[idx] = out[idx] + *g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shapes("t", &[4, 1, 3], &[2, 1]).unwrap(),
            vec![4, 2, 3]
        );
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_reverses_broadcast() {
        // grad over [2,3] reduced to [3]: column sums
        let grad = [1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        let out = reduce_to_shape(&grad, &[2, 3], &[3]);
        assert_eq!(out, vec![11.0, 22.0, 33.0]);
    }
}
