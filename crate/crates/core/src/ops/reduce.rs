//! Reductions and pooling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decompose a shape around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements; rank-0 result.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![acc],
            Vec::new(),
            vec![self.clone()],
            move |grad_out| {
                let g = grad_out[0];
                vec![Some(vec![g; n])]
            },
        )
    }

    /// Mean of all elements; rank-0 result.
    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        self.sum_all()?.scale(T::one() / T::from_f64(n as f64))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "mean_axis",
                shape,
                detail: format!("axis {axis} out of range"),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let inv = T::one() / T::from_f64(extent as f64);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    let out_base = o * inner;
                    for i in 0..inner {
                        out[out_base + i] = out[out_base + i] + x[base + i];
                    }
                }
            }
            for v in out.iter_mut() {
                *v = *v * inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Tensor::from_op(
            "mean_axis",
            out,
            out_shape,
            vec![self.clone()],
            move |grad_out| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            dx[base + i] = grad_out[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Max over `axis`, removing it. Gradient routes to the first maximal
    /// element of each slice.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::BadShape {
                op: "max_axis",
                shape,
                detail: format!("axis {axis} out of range or empty"),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = x[o * extent * inner + i];
                    let mut best_e = 0usize;
                    for e in 1..extent {
                        let v = x[(o * extent + e) * inner + i];
                        if v > best {
                            best = v;
                            best_e = e;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = best_e;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Tensor::from_op(
            "max_axis",
            out,
            out_shape,
            vec![self.clone()],
            move |grad_out| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let e = argmax[o * inner + i];
                        dx[(o * extent + e) * inner + i] = grad_out[o * inner + i];
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Per-channel spatial mean of a `[B, C, H, W]` feature map -> `[B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                shape,
                detail: "expects [B, C, H, W] with H, W >= 1".to_string(),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let mut out = vec![T::zero(); b * c];
        {
            let x = self.data();
            for bc in 0..b * c {
                let mut acc = T::zero();
                for &v in &x[bc * hw..(bc + 1) * hw] {
                    acc = acc + v;
                }
                out[bc] = acc * inv;
            }
        }
        Tensor::from_op(
            "global_avg_pool",
            out,
            vec![b, c],
            vec![self.clone()],
            move |grad_out| {
                let mut dx = vec![T::zero(); b * c * hw];
                for bc in 0..b * c {
                    let g = grad_out[bc] * inv;
                    for v in &mut dx[bc * hw..(bc + 1) * hw] {
                        *v = g;
                    }
                }
                vec![Some(dx)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn gap_constant_map() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 2.5);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        for v in y.data().iter() {
            assert_eq!(*v, 2.5);
        }
    }

    #[test]
    fn gap_hand_mean() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.global_avg_pool().unwrap().data()[0], 2.5);
    }

    #[test]
    fn gap_is_permutation_invariant_over_space() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = rng.normal(&[1, 2, 3, 3], 1.0);
        let y = x.global_avg_pool().unwrap();
        // reverse the spatial order per channel
        let mut data = x.to_vec();
        for ch in data.chunks_mut(9) {
            ch.reverse();
        }
        let xr = Tensor::from_vec(data, &[1, 2, 3, 3]).unwrap();
        let yr = xr.global_avg_pool().unwrap();
        for (a, b) in y.data().iter().zip(yr.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_and_max_axis() {
        let x = Tensor::from_vec(vec![1.0f64, 5.0, 2.0, 8.0, 0.0, 3.0], &[2, 3]).unwrap();
        assert_eq!(x.mean_axis(0).unwrap().to_vec(), vec![4.5, 2.5, 2.5]);
        assert_eq!(x.max_axis(1).unwrap().to_vec(), vec![5.0, 8.0]);
    }

    #[test]
    fn max_axis_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::param(vec![1.0, 5.0, 2.0], &[1, 3]).unwrap();
        let y = x.max_axis(1).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
