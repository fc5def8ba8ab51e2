//! Pointwise nonlinearities: GELU (tanh form) and a numerically stable
//! sigmoid.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (T::zero() - x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    /// GELU in the tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        let shape = self.shape();
        let src = self.clone();
        Tensor::from_op("gelu", out, shape, vec![self.clone()], move |grad_out| {
            let three = T::from_f64(3.0);
            let x = src.data();
            let grad = grad_out
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + three * k * x * x);
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                    g * d
                })
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.shape();
        let saved = out.clone();
        Tensor::from_op("sigmoid", out, shape, vec![self.clone()], move |grad_out| {
            let grad = grad_out
                .iter()
                .zip(saved.iter())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            vec![Some(grad)]
        })
    }
}
