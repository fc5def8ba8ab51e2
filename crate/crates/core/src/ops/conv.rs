//! 2-D cross-correlation with stride, symmetric zero padding, and groups.

use crate::error::{Error, Result};
use crate::macs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Output extent of one spatial axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlate `self: [B, C, H, W]` with `weight: [Co, C/g, kh, kw]`.
    /// `groups == C` gives the depthwise form. Bias is not part of this op.
    pub fn conv2d(&self, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        let x_shape = self.shape();
        let w_shape = weight.shape();
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape,
                rhs: w_shape,
            });
        }
        let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (co, ci_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        let g = spec.groups;
        if g == 0 || c % g != 0 || co % g != 0 || ci_g != c / g {
            return Err(Error::Config(format!(
                "conv2d groups={g} incompatible with in_channels={c}, out_channels={co}, weight in_channels={ci_g}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_extent(h, kh, spec.stride, spec.padding),
            conv_out_extent(w, kw, spec.stride, spec.padding),
        ) else {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: x_shape,
                detail: format!(
                    "spatial extents do not admit kernel {kh}x{kw} stride {} padding {}",
                    spec.stride, spec.padding
                ),
            });
        };

        let co_g = co / g;
        let mut out = vec![T::zero(); b * co * oh * ow];
        {
            let x = self.data();
            let wt = weight.data();
            forward_kernel(
                &x, &wt, &mut out, b, c, h, w, co, ci_g, co_g, kh, kw, oh, ow, spec,
            );
        }
        macs::add((b * co * oh * ow * ci_g * kh * kw) as u64);

        let x_t = self.clone();
        let w_t = weight.clone();
        let x_numel = self.numel();
        let w_numel = weight.numel();
        let out_shape = vec![b, co, oh, ow];
        Tensor::from_op(
            "conv2d",
            out,
            out_shape,
            vec![self.clone(), weight.clone()],
            move |grad_out| {
                let x = x_t.data();
                let wt = w_t.data();
                let mut dx = vec![T::zero(); x_numel];
                let mut dw = vec![T::zero(); w_numel];
                backward_kernel(
                    &x, &wt, grad_out, &mut dx, &mut dw, b, c, h, w, co, ci_g, co_g, kh, kw,
                    oh, ow, spec,
                );
                vec![Some(dx), Some(dw)]
            },
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_kernel<T: Scalar>(
    x: &[T],
    wt: &[T],
    out: &mut [T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    ci_g: usize,
    co_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
) {
    let (s, p) = (spec.stride, spec.padding);
    for bi in 0..b {
        for oc in 0..co {
            let group = oc / co_g;
            let w_base = oc * ci_g * kh * kw;
            let out_base = (bi * co + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for icg in 0..ci_g {
                        let ic = group * ci_g + icg;
                        let x_base = (bi * c + ic) * h * w;
                        let wk_base = w_base + icg * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let wk_row = wk_base + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + x[x_row + ix as usize] * wt[wk_row + kx];
                            }
                        }
                    }
                    out[out_base + oy * ow + ox] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_kernel<T: Scalar>(
    x: &[T],
    wt: &[T],
    grad_out: &[T],
    dx: &mut [T],
    dw: &mut [T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    ci_g: usize,
    co_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
) {
    let (s, p) = (spec.stride, spec.padding);
    for bi in 0..b {
        for oc in 0..co {
            let group = oc / co_g;
            let w_base = oc * ci_g * kh * kw;
            let out_base = (bi * co + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[out_base + oy * ow + ox];
                    for icg in 0..ci_g {
                        let ic = group * ci_g + icg;
                        let x_base = (bi * c + ic) * h * w;
                        let wk_base = w_base + icg * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = iy as usize * w;
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = x_base + row + ix as usize;
                                let wi = wk_base + ky * kw + kx;
                                dx[xi] = dx[xi] + g * wt[wi];
                                dw[wi] = dw[wi] + g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn pointwise_kernel_equals_channel_matmul() {
        let mut rng = Rng::new(11);
        let x: Tensor<f64> = rng.normal(&[2, 3, 4, 4], 1.0);
        let w: Tensor<f64> = rng.normal(&[5, 3, 1, 1], 1.0);
        let y = x.conv2d(&w, Conv2dSpec::default()).unwrap();

        // Same thing as a matmul over channels at each pixel.
        let perm = x.permute(&[0, 2, 3, 1]).unwrap(); // [B,H,W,C]
        let flat = perm.reshape(&[2 * 16, 3]).unwrap();
        let wm = w.reshape(&[5, 3]).unwrap().permute(&[1, 0]).unwrap();
        let ym = flat.matmul(&wm).unwrap(); // [32, 5]
        let ym = ym
            .reshape(&[2, 4, 4, 5])
            .unwrap()
            .permute(&[0, 3, 1, 2])
            .unwrap();
        for (a, b) in y.data().iter().zip(ym.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ones_kernel_center_overlap_is_nine() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x
            .conv2d(
                &w,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
            )
            .unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0); // center sees all nine taps
        assert_eq!(y.data()[0], 4.0); // corner sees four
    }

    #[test]
    fn stride_two_shape_arithmetic() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        let y = x
            .conv2d(
                &w,
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                    groups: 1,
                },
            )
            .unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4, 4]);
    }

    #[test]
    fn bad_group_factorization_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 6, 4, 4]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        let err = x
            .conv2d(
                &w,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: 4,
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn depthwise_keeps_channels_independent() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.normal(&[1, 3, 5, 5], 1.0);
        let w: Tensor<f64> = rng.normal(&[3, 1, 3, 3], 1.0);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: 3,
        };
        let y = x.conv2d(&w, spec).unwrap();

        // Zero out channel 2 of the input; channels 0 and 1 must not move.
        let mut x2 = x.to_vec();
        for v in &mut x2[2 * 25..3 * 25] {
            *v = 0.0;
        }
        let x2 = Tensor::from_vec(x2, &[1, 3, 5, 5]).unwrap();
        let y2 = x2.conv2d(&w, spec).unwrap();
        assert_eq!(y.data()[..50], y2.data()[..50]);
    }

    #[test]
    fn macs_use_nominal_count() {
        crate::macs::reset();
        let x = Tensor::<f64>::ones(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::ones(&[3, 2, 3, 3]);
        let _ = x
            .conv2d(
                &w,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
            )
            .unwrap();
        // B·Co·Oh·Ow·Ci_g·kh·kw = 1·3·4·4·2·9, border taps included.
        assert_eq!(crate::macs::total(), 864);
    }
}
