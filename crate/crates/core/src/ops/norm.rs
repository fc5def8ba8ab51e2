//! Last-axis normalizations: layer norm with affine, and row L2
//! normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Layer normalization over the last axis: per position, zero mean and
    /// unit variance (population variance, `eps`-stabilized), then
    /// `gamma·x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape.last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            shape: shape.clone(),
            detail: "rank must be >= 1".to_string(),
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let eps_t = T::from_f64(eps);
        let rows = self.numel() / c;
        let inv_c = T::one() / T::from_f64(c as f64);

        let mut out = vec![T::zero(); self.numel()];
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mut mean = T::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_c;
                let istd = T::one() / (var + eps_t).sqrt();
                inv_std[r] = istd;
                for j in 0..c {
                    let xh = (row[j] - mean) * istd;
                    xhat[r * c + j] = xh;
                    out[r * c + j] = g[j] * xh + b[j];
                }
            }
        }

        let gamma_t = gamma.clone();
        Tensor::from_op(
            "layer_norm",
            out,
            shape.clone(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |grad_out| {
                let g = gamma_t.data();
                let mut dx = vec![T::zero(); rows * c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let go = &grad_out[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let istd = inv_std[r];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let dxh = go[j] * g[j];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[j];
                        dgamma[j] = dgamma[j] + go[j] * xh[j];
                        dbeta[j] = dbeta[j] + go[j];
                    }
                    for j in 0..c {
                        let dxh = go[j] * g[j];
                        dx[r * c + j] =
                            istd * (dxh - inv_c * sum_dxhat - inv_c * xh[j] * sum_dxhat_xhat);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        )
    }

    /// Divide each last-axis row by its `eps`-stabilized L2 norm.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape.last().ok_or_else(|| Error::BadShape {
            op: "l2_normalize_rows",
            shape: shape.clone(),
            detail: "rank must be >= 1".to_string(),
        })?;
        let rows = self.numel() / c;
        let eps_t = T::from_f64(eps);

        let mut out = vec![T::zero(); self.numel()];
        let mut inv_norm = vec![T::zero(); rows];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mut ss = T::zero();
                for &v in row {
                    ss = ss + v * v;
                }
                let inv = T::one() / (ss + eps_t).sqrt();
                inv_norm[r] = inv;
                for j in 0..c {
                    out[r * c + j] = row[j] * inv;
                }
            }
        }

        let src = self.clone();
        Tensor::from_op(
            "l2_normalize_rows",
            out,
            shape.clone(),
            vec![self.clone()],
            move |grad_out| {
                // dx = g/n - x (g·x) / n³  with n the stabilized norm
                let x = src.data();
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let row = &x[r * c..(r + 1) * c];
                    let g = &grad_out[r * c..(r + 1) * c];
                    let inv = inv_norm[r];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g[j] * row[j];
                    }
                    let inv3 = inv * inv * inv;
                    for j in 0..c {
                        dx[r * c + j] = g[j] * inv - row[j] * dot * inv3;
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
    fn constant_row_maps_to_beta() {
        let x = Tensor::from_vec(vec![5.0f64, 5.0, 5.0], &[1, 3]).unwrap();
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in y.data().iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn two_point_row_hand_value() {
        let x = Tensor::from_vec(vec![1.0f64, 3.0], &[1, 2]).unwrap();
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        // mean 2, population std 1
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn output_statistics_match_affine() {
        let mut rng = Rng::new(123);
        let c = 64;
        let rows = 10_000 / c + 1;
        let x: Tensor<f64> = rng.normal(&[rows, c], 3.0);
        let gamma = Tensor::full(&[c], 1.7);
        let beta = Tensor::full(&[c], 0.3);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for row in y.data().chunks(c) {
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            assert!((mean - 0.3).abs() < 1e-6, "mean {mean}");
            assert!((var.sqrt() - 1.7).abs() < 1e-2, "std {}", var.sqrt());
        }
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut rng = Rng::new(8);
        let x: Tensor<f64> = rng.normal(&[5, 7], 2.0);
        let y = x.l2_normalize_rows(1e-12).unwrap();
        for row in y.data().chunks(7) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
