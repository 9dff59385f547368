//! Loss functions for the classifier stage.
//!
//! Each loss consumes head outputs, reduces to a scalar on the tape, and
//! registers its own pull-back so gradients reach the model. Reductions are
//! means (mean over events for the survival loss) so magnitudes do not
//! depend on batch size. Multi-label training sums the per-label losses in
//! declared label order.

use crate::tensor::{ops, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("sample {index}: target class {target} outside 0..{classes}")]
    TargetOutOfRange { index: usize, target: usize, classes: usize },
    #[error("prediction count {got} does not match target count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sample {index}: period {value} must be a positive finite number")]
    BadPeriod { index: usize, value: f64 },
    #[error("survival batch holds no events, partial likelihood is undefined")]
    NoEvents,
    #[error("at least one per-label loss is required")]
    Empty,
    #[error("loss input must be a column or flat vector, got shape {0:?}")]
    BadShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    Mse,
    Rmse,
    Mae,
}

/// Keeps RMSE differentiable at zero error.
const RMSE_EPS: f64 = 1e-12;

fn flat_len(t: &Tensor) -> Result<usize, LossError> {
    match t.shape() {
        [n] => Ok(*n),
        [n, 1] => Ok(*n),
        other => Err(LossError::BadShape(format!("{other:?}"))),
    }
}

/// Mean negative log-likelihood of the target classes under softmax.
///
/// `logits` is [batch, classes]; each target indexes a row's true class.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    tape: Option<&Tape>,
) -> Result<Tensor, LossError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(LossError::BadShape(format!("{shape:?}")));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if targets.len() != batch {
        return Err(LossError::LengthMismatch { expected: batch, got: targets.len() });
    }
    for (index, &target) in targets.iter().enumerate() {
        if target >= classes {
            return Err(LossError::TargetOutOfRange { index, target, classes });
        }
    }
    let log_probs = ops::log_softmax(logits, tape)?;
    let loss: f64 = {
        let lp = log_probs.data();
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(lp[i * classes + t] as f64))
            .sum::<f64>()
            / batch as f64
    };
    let recorded = tape.is_some() && log_probs.grad_enabled();
    let y = Tensor::from_parts(vec![1], vec![loss as f32], recorded);
    if recorded {
        let (lp, y2) = (log_probs.clone(), y.clone());
        let targets = targets.to_vec();
        let scale = 1.0 / batch as f32;
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let mut g = vec![0f32; lp.numel()];
            for (i, &t) in targets.iter().enumerate() {
                g[i * classes + t] = -gy[0] * scale;
            }
            lp.accumulate_grad(&g);
        }));
    }
    Ok(y)
}

/// MSE, RMSE, or MAE between a [batch] or [batch, 1] prediction block and
/// plain targets. MAE uses subgradient 0 at zero residual.
pub fn regression_loss(
    pred: &Tensor,
    targets: &[f64],
    kind: RegressionKind,
    tape: Option<&Tape>,
) -> Result<Tensor, LossError> {
    let n = flat_len(pred)?;
    if targets.len() != n {
        return Err(LossError::LengthMismatch { expected: n, got: targets.len() });
    }
    let residuals: Vec<f64> = {
        let pv = pred.data();
        pv.iter().zip(targets).map(|(&p, &t)| p as f64 - t).collect()
    };
    let count = n as f64;
    let mse = residuals.iter().map(|d| d * d).sum::<f64>() / count;
    let value = match kind {
        RegressionKind::Mse => mse,
        RegressionKind::Rmse => (mse + RMSE_EPS).sqrt(),
        RegressionKind::Mae => residuals.iter().map(|d| d.abs()).sum::<f64>() / count,
    };
    let recorded = tape.is_some() && pred.grad_enabled();
    let y = Tensor::from_parts(vec![1], vec![value as f32], recorded);
    if recorded {
        let (pred2, y2) = (pred.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let g0 = gy[0] as f64;
            let g: Vec<f32> = residuals
                .iter()
                .map(|&d| {
                    let dd = match kind {
                        RegressionKind::Mse => 2.0 * d / count,
                        RegressionKind::Rmse => d / (count * value),
                        RegressionKind::Mae => {
                            if d == 0.0 {
                                0.0
                            } else {
                                d.signum() / count
                            }
                        }
                    };
                    (g0 * dd) as f32
                })
                .collect();
            pred2.accumulate_grad(&g);
        }));
    }
    Ok(y)
}

/// Negative mean partial log-likelihood of the proportional-hazards model,
/// Breslow tie handling: every event contributes −(h_i − log Σ exp(h_j))
/// over its risk set {j : period_j ≥ period_i}, and tied events share the
/// risk set. Log-sum-exp is max-stabilized.
pub fn cox_npll(
    risks: &Tensor,
    events: &[bool],
    periods: &[f64],
    tape: Option<&Tape>,
) -> Result<Tensor, LossError> {
    let n = flat_len(risks)?;
    if events.len() != n {
        return Err(LossError::LengthMismatch { expected: n, got: events.len() });
    }
    if periods.len() != n {
        return Err(LossError::LengthMismatch { expected: n, got: periods.len() });
    }
    for (index, &p) in periods.iter().enumerate() {
        if !(p.is_finite() && p > 0.0) {
            return Err(LossError::BadPeriod { index, value: p });
        }
    }
    let event_count = events.iter().filter(|&&e| e).count();
    if event_count == 0 {
        return Err(LossError::NoEvents);
    }
    let h: Vec<f64> = risks.data().iter().map(|&v| v as f64).collect();
    // Per-event log-sum-exp over its risk set.
    let mut lse = vec![0f64; n];
    let mut loss = 0f64;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            if periods[j] >= periods[i] {
                m = m.max(h[j]);
            }
        }
        let mut s = 0f64;
        for j in 0..n {
            if periods[j] >= periods[i] {
                s += (h[j] - m).exp();
            }
        }
        lse[i] = m + s.ln();
        loss += lse[i] - h[i];
    }
    loss /= event_count as f64;
    let recorded = tape.is_some() && risks.grad_enabled();
    let y = Tensor::from_parts(vec![1], vec![loss as f32], recorded);
    if recorded {
        let (risks2, y2) = (risks.clone(), y.clone());
        let events = events.to_vec();
        let periods = periods.to_vec();
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let g0 = gy[0] as f64 / event_count as f64;
            let mut g = vec![0f64; n];
            for i in 0..n {
                if !events[i] {
                    continue;
                }
                g[i] -= 1.0;
                for (j, gj) in g.iter_mut().enumerate() {
                    if periods[j] >= periods[i] {
                        *gj += (h[j] - lse[i]).exp();
                    }
                }
            }
            let g: Vec<f32> = g.iter().map(|&v| (g0 * v) as f32).collect();
            risks2.accumulate_grad(&g);
        }));
    }
    Ok(y)
}

/// Sum of per-label losses, accumulated left to right in declared order.
/// A single loss passes through untouched.
pub fn total_loss(losses: &[Tensor], tape: Option<&Tape>) -> Result<Tensor, LossError> {
    let (first, rest) = losses.split_first().ok_or(LossError::Empty)?;
    let mut total = first.clone();
    for loss in rest {
        total = ops::add(&total, loss, tape)?;
    }
    Ok(total)
}
