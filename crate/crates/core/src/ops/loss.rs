//! Fused cross-entropy over logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `self: [B, classes]`. Stabilized in the log domain.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape,
                detail: "expects [batch, classes] logits".to_string(),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape,
                detail: format!("{} targets for batch {b}", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape,
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }

        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        {
            let x = self.data();
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * c..(r + 1) * c];
                let mut max = row[0];
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[r * c + j] = e;
                    sum = sum + e;
                }
                for p in &mut probs[r * c..(r + 1) * c] {
                    *p = *p / sum;
                }
                // log-softmax at the target, stabilized
                loss = loss - ((row[t] - max) - sum.ln());
            }
        }
        let inv_b = T::one() / T::from_f64(b as f64);
        loss = loss * inv_b;

        let targets_owned = targets.to_vec();
        Tensor::from_op(
            "cross_entropy",
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            move |grad_out| {
                let g = grad_out[0] * inv_b;
                let mut dx = vec![T::zero(); b * c];
                for (r, &t) in targets_owned.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == t { T::one() } else { T::zero() };
                        dx[r * c + j] = g * (probs[r * c + j] - indicator);
                    }
                }
                vec![Some(dx)]
            },
        )
    }
}
