//! Broadcasting elementwise arithmetic.

use crate::error::Result;
use crate::ops::{broadcast_shapes, broadcast_strides, reduce_to_shape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }
}

fn binary<T: Scalar>(op: BinOp, lhs: &Tensor<T>, rhs: &Tensor<T>) -> Result<Tensor<T>> {
    let a_shape = lhs.shape();
    let b_shape = rhs.shape();
    let out_shape = broadcast_shapes(op.name(), &a_shape, &b_shape)?;
    let rank = out_shape.len();
    let a_read = broadcast_strides(&a_shape, rank);
    let b_read = broadcast_strides(&b_shape, rank);
    let numel: usize = out_shape.iter().product();

    let mut out = vec![T::zero(); numel];
    {
        let a = lhs.data();
        let b = rhs.data();
        if a_shape == b_shape {
            // fast path, no index arithmetic
            for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                *o = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                };
            }
        } else {
            let mut coords = vec![0usize; rank];
            for (flat, o) in out.iter_mut().enumerate() {
                let mut rem = flat;
                for d in (0..rank).rev() {
                    coords[d] = rem % out_shape[d];
                    rem /= out_shape[d];
                }
                let mut ai = 0usize;
                let mut bi = 0usize;
                for d in 0..rank {
                    ai += coords[d] * a_read[d];
                    bi += coords[d] * b_read[d];
                }
                let (x, y) = (a[ai], b[bi]);
                *o = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                };
            }
        }
    }

    let lhs_t = lhs.clone();
    let rhs_t = rhs.clone();
    let out_shape_b = out_shape.clone();
    Tensor::from_op(
        op.name(),
        out,
        out_shape,
        vec![lhs.clone(), rhs.clone()],
        move |grad_out| {
            let a_shape = lhs_t.shape();
            let b_shape = rhs_t.shape();
            match op {
                BinOp::Add => vec![
                    Some(reduce_to_shape(grad_out, &out_shape_b, &a_shape)),
                    Some(reduce_to_shape(grad_out, &out_shape_b, &b_shape)),
                ],
                BinOp::Sub => {
                    let neg: Vec<T> = grad_out.iter().map(|g| T::zero() - *g).collect();
                    vec![
                        Some(reduce_to_shape(grad_out, &out_shape_b, &a_shape)),
                        Some(reduce_to_shape(&neg, &out_shape_b, &b_shape)),
                    ]
                }
                BinOp::Mul => {
                    let rank = out_shape_b.len();
                    let a_read = broadcast_strides(&a_shape, rank);
                    let b_read = broadcast_strides(&b_shape, rank);
                    let a = lhs_t.data();
                    let b = rhs_t.data();
                    let mut ga = vec![T::zero(); grad_out.len()];
                    let mut gb = vec![T::zero(); grad_out.len()];
                    let mut coords = vec![0usize; rank];
                    for (flat, &g) in grad_out.iter().enumerate() {
                        let mut rem = flat;
                        for d in (0..rank).rev() {
                            coords[d] = rem % out_shape_b[d];
                            rem /= out_shape_b[d];
                        }
                        let mut ai = 0usize;
                        let mut bi = 0usize;
                        for d in 0..rank {
                            ai += coords[d] * a_read[d];
                            bi += coords[d] * b_read[d];
                        }
                        ga[flat] = g * b[bi];
                        gb[flat] = g * a[ai];
                    }
                    vec![
                        Some(reduce_to_shape(&ga, &out_shape_b, &a_shape)),
                        Some(reduce_to_shape(&gb, &out_shape_b, &b_shape)),
                    ]
                }
            }
        },
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinOp::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinOp::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinOp::Mul, self, rhs)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|v| *v * factor).collect();
        let shape = self.shape();
        Tensor::from_op("scale", out, shape, vec![self.clone()], move |grad_out| {
            vec![Some(grad_out.iter().map(|g| *g * factor).collect())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_broadcast_and_grad_reduction() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mul_gradient_routes_operands() {
        let a = Tensor::<f64>::param(vec![2.0, 3.0], &[2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 7.0], &[2]).unwrap();
        let y = a.mul(&b).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }
}
