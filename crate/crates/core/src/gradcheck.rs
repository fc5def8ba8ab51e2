//! Central finite-difference gradient oracle.
//!
//! Runs at 64-bit only: `f32` finite differences are dominated by rounding
//! noise and are not meaningful against a 1e-4 tolerance.

use crate::error::Result;
use crate::tensor::Tensor;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

/// Outcome of [`grad_check`]. `pass` is true iff every compared coordinate
/// is within tolerance and no probe produced a non-finite value.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub points: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    /// Oracle failure description (non-finite value at a probe point);
    /// `pass` is false when set.
    pub failure: Option<String>,
}

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    pub eps: f64,
    pub tol: f64,
    /// Cap on probed coordinates per parameter; evenly strided selection.
    /// `None` probes every coordinate.
    pub max_points_per_param: Option<usize>,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-5,
            tol: 1e-4,
            max_points_per_param: None,
        }
    }
}

/// Relative error with a floored denominator: gradient pairs below the
/// floor compare on an absolute scale. At eps = 1e-5 the central
/// difference of an order-unity objective carries ~1e-8 of f64 evaluation
/// noise, so a pure ratio would spuriously flag coordinates whose true
/// gradient is merely small; the floor keeps the absolute tolerance at
/// `1e-2 · tol`, two orders above that noise while far below any real
/// backward defect.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-2);
    (a - b).abs() / denom
}

/// Compare tape gradients of the scalar `f(params)` against central finite
/// differences `(f(θ+εe) − f(θ−εe)) / 2ε` for every named parameter.
///
/// A non-finite objective at a probe point is reported, not propagated.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: GradCheckOpts) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (name, p) in params {
        assert!(
            p.requires_grad(),
            "grad_check parameter {name} must be a trainable leaf"
        );
        p.zero_grad();
    }

    // analytic gradients
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradReport {
        entries: Vec::new(),
        points: 0,
        max_rel_err: 0.0,
        tol: opts.tol,
        pass: true,
        failure: None,
    };

    'outer: for ((name, p), grads) in params.iter().zip(analytic.iter()) {
        let n = p.numel();
        let picks: Vec<usize> = match opts.max_points_per_param {
            Some(cap) if cap < n => {
                let stride = n as f64 / cap as f64;
                (0..cap).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..n).collect(),
        };
        let mut entry = GradEntry {
            name: name.clone(),
            points: picks.len(),
            max_rel_err: 0.0,
        };
        let base = p.to_vec();
        for &i in &picks {
            let mut plus = base.clone();
            plus[i] += opts.eps;
            p.set_data(plus);
            let f_plus = match f() {
                Ok(t) => t.item(),
                Err(e) => {
                    report.failure = Some(format!("probe {name}[{i}]+eps: {e}"));
                    report.pass = false;
                    p.set_data(base.clone());
                    break 'outer;
                }
            };
            let mut minus = base.clone();
            minus[i] -= opts.eps;
            p.set_data(minus);
            let f_minus = match f() {
                Ok(t) => t.item(),
                Err(e) => {
                    report.failure = Some(format!("probe {name}[{i}]-eps: {e}"));
                    report.pass = false;
                    p.set_data(base.clone());
                    break 'outer;
                }
            };
            p.set_data(base.clone());
            if !f_plus.is_finite() || !f_minus.is_finite() {
                report.failure = Some(format!("non-finite objective at probe {name}[{i}]"));
                report.pass = false;
                break 'outer;
            }
            let fd = (f_plus - f_minus) / (2.0 * opts.eps);
            let err = rel_err(fd, grads[i]);
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
            }
        }
        report.points += entry.points;
        if entry.max_rel_err > report.max_rel_err {
            report.max_rel_err = entry.max_rel_err;
        }
        report.entries.push(entry);
    }

    if report.failure.is_none() {
        report.pass = report.max_rel_err < opts.tol;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let xc = x.clone();
        let report = grad_check(
            move || xc.mul(&xc)?.sum_all(),
            &[("x".to_string(), x.clone())],
            GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
        // tape gradient of sum(x^2) is 2x
        x.zero_grad();
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn softmax_sum_has_null_gradient() {
        let x = Tensor::<f64>::param(vec![0.3, -1.2, 2.0], &[1, 3]).unwrap();
        let xc = x.clone();
        let report = grad_check(
            move || xc.softmax_rows()?.sum_all(),
            &[("logits".to_string(), x.clone())],
            GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // the tape gradient itself is numerically zero: rows sum to a constant
        x.zero_grad();
        let y = x.softmax_rows().unwrap().sum_all().unwrap();
        y.backward().unwrap();
        for g in x.grad().unwrap() {
            assert!(g.abs() < 1e-12, "gradient entry {g}");
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // x * detach(x) evaluates like x^2 but back-propagates only one
        // factor, so the tape gradient is wrong by half.
        let x = Tensor::<f64>::param(vec![1.5, -0.7], &[2]).unwrap();
        let xc = x.clone();
        let report = grad_check(
            move || xc.mul(&xc.detach())?.sum_all(),
            &[("x".to_string(), x)],
            GradCheckOpts::default(),
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.4);
    }

    #[test]
    fn sampled_points_are_capped() {
        let x = Tensor::<f64>::param(vec![0.1; 100], &[100]).unwrap();
        let xc = x.clone();
        let report = grad_check(
            move || xc.mul(&xc)?.sum_all(),
            &[("x".to_string(), x)],
            GradCheckOpts {
                max_points_per_param: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.points, 7);
        assert!(report.pass);
    }
}
