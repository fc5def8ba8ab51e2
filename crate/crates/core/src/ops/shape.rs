//! Shape movement: reshape, permute, concat, narrow, zero-padding,
//! broadcast materialization, and row gathering.

use crate::error::{Error, Result};
use crate::ops::{broadcast_strides, reduce_to_shape};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Same data, new shape (element counts must agree).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                detail: format!("cannot reshape {} elements", self.numel()),
            });
        }
        let old_numel = self.numel();
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            move |grad_out| {
                debug_assert_eq!(grad_out.len(), old_numel);
                vec![Some(grad_out.to_vec())]
            },
        )
    }

    /// Reorder axes: `out.shape[d] = self.shape[perm[d]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::BadShape {
                op: "permute",
                shape,
                detail: format!("invalid permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_of(&shape);
        let out = permute_copy(&self.data(), &out_shape, perm, &in_strides);

        let perm_owned = perm.to_vec();
        let in_shape = shape.clone();
        Tensor::from_op(
            "permute",
            out,
            out_shape.clone(),
            vec![self.clone()],
            move |grad_out| {
                // inverse permutation maps grads back
                let mut inv = vec![0usize; perm_owned.len()];
                for (d, &p) in perm_owned.iter().enumerate() {
                    inv[p] = d;
                }
                let out_strides = strides_of(&out_shape);
                let grad = permute_copy(grad_out, &in_shape, &inv, &out_strides);
                vec![Some(grad)]
            },
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::BadShape {
                op: "transpose_last",
                shape: self.shape(),
                detail: "rank must be >= 2".to_string(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::BadShape {
                op: "narrow",
                shape,
                detail: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = (o * extent + start) * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Tensor::from_op(
            "narrow",
            out,
            out_shape,
            vec![self.clone()],
            move |grad_out| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&grad_out[src..src + len * inner]);
                }
                vec![Some(dx)]
            },
        )
    }

    /// Zero-pad `count` entries at the end of `axis`.
    pub fn pad_axis_end(&self, axis: usize, count: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "pad_axis_end",
                shape,
                detail: format!("axis {axis} out of range"),
            });
        }
        if count == 0 {
            return self.reshape(&shape);
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let new_extent = extent + count;
        let mut out = vec![T::zero(); outer * new_extent * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = o * extent * inner;
                let dst = o * new_extent * inner;
                out[dst..dst + extent * inner].copy_from_slice(&x[src..src + extent * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = new_extent;
        Tensor::from_op(
            "pad_axis_end",
            out,
            out_shape,
            vec![self.clone()],
            move |grad_out| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = o * extent * inner;
                    let src = o * new_extent * inner;
                    dx[dst..dst + extent * inner]
                        .copy_from_slice(&grad_out[src..src + extent * inner]);
                }
                vec![Some(dx)]
            },
        )
    }

    /// Materialize a numpy-style broadcast of `self` to `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = target.len();
        if shape.len() > rank {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: shape,
                rhs: target.to_vec(),
            });
        }
        let offset = rank - shape.len();
        for (i, &d) in shape.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: shape,
                    rhs: target.to_vec(),
                });
            }
        }
        let read = broadcast_strides(&shape, rank);
        let numel: usize = target.iter().product();
        let mut out = vec![T::zero(); numel];
        {
            let x = self.data();
            let mut coords = vec![0usize; rank];
            for (flat, o) in out.iter_mut().enumerate() {
                let mut rem = flat;
                for d in (0..rank).rev() {
                    coords[d] = rem % target[d];
                    rem /= target[d];
                }
                let mut idx = 0usize;
                for d in 0..rank {
                    idx += coords[d] * read[d];
                }
                *o = x[idx];
            }
        }
        let src_shape = shape.clone();
        let target_owned = target.to_vec();
        Tensor::from_op(
            "broadcast_to",
            out,
            target.to_vec(),
            vec![self.clone()],
            move |grad_out| {
                vec![Some(reduce_to_shape(grad_out, &target_owned, &src_shape))]
            },
        )
    }

    /// Concatenate along `axis`. All parts must agree on every other axis.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: first,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut total_extent = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            total_extent += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total_extent;
        let mut out = vec![T::zero(); outer * total_extent * inner];
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        {
            let mut offset = 0usize;
            for (p, &ext) in parts.iter().zip(extents.iter()) {
                let x = p.data();
                for o in 0..outer {
                    let src = o * ext * inner;
                    let dst = (o * total_extent + offset) * inner;
                    out[dst..dst + ext * inner].copy_from_slice(&x[src..src + ext * inner]);
                }
                offset += ext;
            }
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op(
            "concat",
            out,
            out_shape,
            parents,
            move |grad_out| {
                let mut grads = Vec::with_capacity(extents.len());
                let mut offset = 0usize;
                for &ext in &extents {
                    let mut g = vec![T::zero(); outer * ext * inner];
                    for o in 0..outer {
                        let src = (o * total_extent + offset) * inner;
                        let dst = o * ext * inner;
                        g[dst..dst + ext * inner]
                            .copy_from_slice(&grad_out[src..src + ext * inner]);
                    }
                    grads.push(Some(g));
                    offset += ext;
                }
                grads
            },
        )
    }

    /// Gather rows of a `[R, C]` table by index; backward scatter-adds.
    /// Used for relative-position bias lookups.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape,
                detail: "expects a [rows, cols] table".to_string(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape,
                detail: format!("index {bad} out of range for {r} rows"),
            });
        }
        let n = indices.len();
        let mut out = vec![T::zero(); n * c];
        {
            let x = self.data();
            for (k, &i) in indices.iter().enumerate() {
                out[k * c..(k + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather_rows",
            out,
            vec![n, c],
            vec![self.clone()],
            move |grad_out| {
                let mut dt = vec![T::zero(); r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] = dt[i * c + j] + grad_out[k * c + j];
                    }
                }
                vec![Some(dt)]
            },
        )
    }
}

fn permute_copy<T: Scalar>(
    src: &[T],
    out_shape: &[usize],
    perm: &[usize],
    in_strides: &[usize],
) -> Vec<T> {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let mut coords = vec![0usize; rank];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut idx = 0usize;
        for d in 0..rank {
            idx += coords[d] * in_strides[perm[d]];
        }
        *o = src[idx];
    }
    out
}
