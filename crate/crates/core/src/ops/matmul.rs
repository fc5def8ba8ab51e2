//! Batched matrix multiplication with numpy-style leading-dim broadcasting.

use crate::error::{Error, Result};
use crate::macs;
use crate::ops::{broadcast_shapes, broadcast_strides};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] · b[k,n]`, accumulating into `c`.
fn matmul_2d_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
fn matmul_2d_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
fn matmul_2d_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    }
}

struct BatchPlan {
    lead: Vec<usize>,
    batches: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan(a_shape: &[usize], b_shape: &[usize]) -> Result<BatchPlan> {
    let a_lead = &a_shape[..a_shape.len() - 2];
    let b_lead = &b_shape[..b_shape.len() - 2];
    let lead = broadcast_shapes("matmul", a_lead, b_lead)?;
    let batches: usize = lead.iter().product();
    let rank = lead.len();
    let a_read = broadcast_strides(a_lead, rank);
    let b_read = broadcast_strides(b_lead, rank);
    let mut a_offsets = Vec::with_capacity(batches);
    let mut b_offsets = Vec::with_capacity(batches);
    let mut coords = vec![0usize; rank];
    for flat in 0..batches {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % lead[d];
            rem /= lead[d];
        }
        let mut ao = 0usize;
        let mut bo = 0usize;
        for d in 0..rank {
            ao += coords[d] * a_read[d];
            bo += coords[d] * b_read[d];
        }
        a_offsets.push(ao);
        b_offsets.push(bo);
    }
    Ok(BatchPlan {
        lead,
        batches,
        a_offsets,
        b_offsets,
    })
}

impl<T: Scalar> Tensor<T> {
    /// Batched contraction `[.., m, k] × [.., k, n] -> [.., m, n]`.
    /// Leading dimensions broadcast. Counts `batches·m·k·n` MACs.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let a_shape = self.shape();
        let b_shape = rhs.shape();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let k = ka;
        let plan = batch_plan(&a_shape, &b_shape)?;

        let mut out_shape = plan.lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::zero(); plan.batches * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for batch in 0..plan.batches {
                let a_off = plan.a_offsets[batch] * m * k;
                let b_off = plan.b_offsets[batch] * k * n;
                matmul_2d_acc(
                    &a[a_off..a_off + m * k],
                    &b[b_off..b_off + k * n],
                    &mut out[batch * m * n..(batch + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        macs::add((plan.batches * m * k * n) as u64);

        let lhs = self.clone();
        let rhs_t = rhs.clone();
        let a_numel = self.numel();
        let b_numel = rhs.numel();
        Tensor::from_op(
            "matmul",
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |grad_out| {
                let a = lhs.data();
                let b = rhs_t.data();
                let mut da = vec![T::zero(); a_numel];
                let mut db = vec![T::zero(); b_numel];
                for batch in 0..plan.batches {
                    let g = &grad_out[batch * m * n..(batch + 1) * m * n];
                    let a_off = plan.a_offsets[batch] * m * k;
                    let b_off = plan.b_offsets[batch] * k * n;
                    // dA = dC · Bᵀ, dB = Aᵀ · dC; broadcast batches accumulate.
                    matmul_2d_bt_acc(
                        g,
                        &b[b_off..b_off + k * n],
                        &mut da[a_off..a_off + m * k],
                        m,
                        n,
                        k,
                    );
                    matmul_2d_at_acc(
                        &a[a_off..a_off + m * k],
                        g,
                        &mut db[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![Some(da), Some(db)]
            },
        )
    }
}
