//! Row softmax over the last axis, stabilized by row-max subtraction, with
//! an optional key-validity mask for padded windows.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Key-axis validity mask shared by all rows of a window.
///
/// `valid` is laid out `[windows, keys]`. When applied to scores of shape
/// `[G, .., keys]`, row group `i0` (the leading axis) uses mask row
/// `i0 % windows`. Masked keys receive zero attention weight; the mask is
/// constant metadata, not a graph input.
#[derive(Debug, Clone)]
pub struct KeyMask {
    pub windows: usize,
    pub keys: usize,
    pub valid: Vec<bool>,
}

impl KeyMask {
    pub fn new(windows: usize, keys: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != windows * keys {
            return Err(Error::BadShape {
                op: "key_mask",
                shape: vec![windows, keys],
                detail: format!("mask length {} != windows*keys", valid.len()),
            });
        }
        if !valid.chunks(keys).all(|row| row.iter().any(|&v| v)) {
            return Err(Error::BadShape {
                op: "key_mask",
                shape: vec![windows, keys],
                detail: "a mask row has no valid key".to_string(),
            });
        }
        Ok(KeyMask {
            windows,
            keys,
            valid,
        })
    }

    /// Mask where every key is valid.
    pub fn all_valid(windows: usize, keys: usize) -> Self {
        KeyMask {
            windows,
            keys,
            valid: vec![true; windows * keys],
        }
    }

    /// Append `extra` always-valid key columns (coordinator keys).
    pub fn extend_keys(&self, extra: usize) -> Self {
        let keys = self.keys + extra;
        let mut valid = Vec::with_capacity(self.windows * keys);
        for row in self.valid.chunks(self.keys) {
            valid.extend_from_slice(row);
            valid.extend(std::iter::repeat(true).take(extra));
        }
        KeyMask {
            windows: self.windows,
            keys,
            valid,
        }
    }
}

fn softmax_impl<T: Scalar>(t: &Tensor<T>, mask: Option<&KeyMask>) -> Result<Tensor<T>> {
    let shape = t.shape();
    if shape.is_empty() || *shape.last().unwrap() == 0 {
        return Err(Error::BadShape {
            op: "softmax_rows",
            shape,
            detail: "needs a last axis of extent >= 1".to_string(),
        });
    }
    let n = *shape.last().unwrap();
    let rows = t.numel() / n;
    let rows_per_group = if shape.len() >= 2 {
        rows / shape[0]
    } else {
        1
    };

    let mask_row = |row: usize| -> Option<&[bool]> {
        mask.map(|m| {
            let group = row / rows_per_group.max(1);
            let win = group % m.windows;
            &m.valid[win * m.keys..(win + 1) * m.keys]
        })
    };

    if let Some(m) = mask {
        if m.keys != n {
            return Err(Error::BadShape {
                op: "softmax_rows",
                shape,
                detail: format!("mask keys {} != last extent {n}", m.keys),
            });
        }
        if shape.len() >= 2 && shape[0] % m.windows != 0 {
            return Err(Error::BadShape {
                op: "softmax_rows",
                shape,
                detail: format!("leading extent not a multiple of {} windows", m.windows),
            });
        }
    }

    let mut out = vec![T::zero(); t.numel()];
    {
        let x = t.data();
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let valid = mask_row(r);
            let is_valid = |j: usize| valid.map_or(true, |v| v[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if is_valid(j) && v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            let out_row = &mut out[r * n..(r + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                if is_valid(j) {
                    let e = (v - max).exp();
                    out_row[j] = e;
                    sum = sum + e;
                }
            }
            for o in out_row.iter_mut() {
                *o = *o / sum;
            }
        }
    }

    let saved = out.clone();
    Tensor::from_op(
        "softmax_rows",
        out,
        shape.clone(),
        vec![t.clone()],
        move |grad_out| {
            // dx_i = y_i (g_i - sum_j g_j y_j); masked entries have y = 0.
            let mut grad = vec![T::zero(); grad_out.len()];
            for r in 0..rows {
                let y = &saved[r * n..(r + 1) * n];
                let g = &grad_out[r * n..(r + 1) * n];
                let mut dot = T::zero();
                for (yv, gv) in y.iter().zip(g.iter()) {
                    dot = dot + *yv * *gv;
                }
                for j in 0..n {
                    grad[r * n + j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(grad)]
        },
    )
}

impl<T: Scalar> Tensor<T> {
    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        softmax_impl(self, None)
    }

    /// Softmax over the last axis with masked key columns receiving zero
    /// weight. Mask rows are selected by the leading axis (see [`KeyMask`]).
    pub fn softmax_rows_masked(&self, mask: &KeyMask) -> Result<Tensor<T>> {
        softmax_impl(self, Some(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let x = Tensor::from_vec(vec![0.0f64; 3], &[3]).unwrap();
        let y = x.softmax_rows().unwrap();
        for v in y.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = crate::Rng::new(9);
        for _ in 0..5 {
            let x: Tensor<f64> = rng.normal(&[4, 6], 2.0);
            let shift = rng.uniform_f64(-30.0, 30.0);
            let shifted = x.add(&Tensor::full(&[4, 6], shift)).unwrap();
            let a = x.softmax_rows().unwrap();
            let b = shifted.softmax_rows().unwrap();
            for (u, v) in a.data().iter().zip(b.data().iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_quarter_three_quarters() {
        let x = Tensor::from_vec(vec![0.0f64, 3.0f64.ln()], &[2]).unwrap();
        let y = x.softmax_rows().unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one_within_1e12() {
        let mut rng = crate::Rng::new(21);
        let x: Tensor<f64> = rng.normal(&[16, 9], 40.0);
        let y = x.softmax_rows().unwrap();
        for row in y.data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight_and_valid_rows_renormalize() {
        let x = Tensor::from_vec(vec![5.0f64, 1.0, 1.0, 900.0], &[1, 1, 4]).unwrap();
        let mask = KeyMask::new(1, 4, vec![true, true, true, false]).unwrap();
        let y = x.softmax_rows_masked(&mask).unwrap();
        assert_eq!(y.data()[3], 0.0);
        let s: f64 = y.data().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fully_masked_row_rejected() {
        assert!(KeyMask::new(1, 2, vec![false, false]).is_err());
    }
}
