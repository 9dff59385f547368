//! Gradient verification by central finite differences.
//!
//! The harness replays a user-supplied forward closure while perturbing one
//! parameter element at a time, then compares the numeric slope against the
//! gradient produced by the tape. Relative error is measured against
//! `max(1, |analytic|, |numeric|)` so near-zero gradients do not blow up the
//! ratio, and the slope is divided by the step that was actually realized in
//! f32 rather than the nominal `2 * eps`.

use super::{backward, Tape, Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_EPS: f32 = 1e-3;

/// Outcome of a finite-difference sweep, including where it was worst.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares tape gradients to central differences for every element of every
/// listed parameter. The closure must rebuild the forward computation from
/// the listed tensors on each call and be deterministic across calls; it
/// receives `Some(tape)` exactly once for the analytic pass and `None` for
/// all value-only probes.
pub fn finite_diff_check<F>(
    params: &[(&str, &Tensor)],
    eps: f32,
    mut f: F,
) -> Result<CheckReport, TensorError>
where
    F: FnMut(Option<&Tape>) -> Result<Tensor, TensorError>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(Some(&tape))?;
    backward(&loss, &tape)?;
    let mut analytic = Vec::with_capacity(params.len());
    for (name, p) in params {
        let g = p
            .grad()
            .ok_or_else(|| TensorError::MissingGradient((*name).to_string()))?;
        analytic.push(g);
    }

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, (name, p)) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let x0 = p.data()[i];
            let xp = x0 + eps;
            let xm = x0 - eps;
            let step = xp as f64 - xm as f64;
            if step == 0.0 {
                return Err(TensorError::DimensionMismatch(format!(
                    "finite difference step underflowed at {name}[{i}] (value {x0})"
                )));
            }
            p.update_data(|d| d[i] = xp);
            let fp = f(None)?.item() as f64;
            p.update_data(|d| d[i] = xm);
            let fm = f(None)?.item() as f64;
            p.update_data(|d| d[i] = x0);
            let numeric = (fp - fm) / step;
            let a = analytic[pi][i] as f64;
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = (*name).to_string();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn square_sum_gradient_matches() {
        let x = Tensor::new(&[3], vec![0.5, -1.25, 2.0], true).unwrap();
        let report = finite_diff_check(&[("x", &x)], DEFAULT_EPS, |tape| {
            let sq = ops::mul(&x, &x, tape)?;
            ops::sum(&sq, tape)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn linear_gradients_match() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 0.7, 1.1, 0.0, -0.9], true).unwrap();
        let w = Tensor::new(&[3, 2], vec![0.3, -0.2, 0.5, 0.8, -0.6, 0.1], true).unwrap();
        let b = Tensor::new(&[2], vec![0.05, -0.15], true).unwrap();
        let report = finite_diff_check(&[("x", &x), ("w", &w), ("b", &b)], DEFAULT_EPS, |tape| {
            let y = ops::linear(&x, &w, &b, tape)?;
            let sq = ops::mul(&y, &y, tape)?;
            ops::mean(&sq, tape)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn unused_parameter_reports_missing_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = Tensor::new(&[1], vec![3.0], true).unwrap();
        let err = finite_diff_check(&[("x", &x), ("unused", &unused)], DEFAULT_EPS, |tape| {
            ops::sum(&x, tape)
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::MissingGradient(name) if name == "unused"));
    }

    #[test]
    fn perturbation_is_restored_bitwise() {
        let x = Tensor::new(&[2], vec![0.1, 0.2], true).unwrap();
        let before = x.to_vec();
        finite_diff_check(&[("x", &x)], DEFAULT_EPS, |tape| ops::sum(&x, tape)).unwrap();
        let after = x.to_vec();
        assert_eq!(before[0].to_bits(), after[0].to_bits());
        assert_eq!(before[1].to_bits(), after[1].to_bits());
    }
}
