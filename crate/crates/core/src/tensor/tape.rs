//! Operation tape and reverse traversal.

use std::cell::RefCell;

use super::{Tensor, TensorError};

struct TapeOp {
    output: Tensor,
    // Pulls the output gradient back into the op's inputs.
    pull: Box<dyn Fn()>,
}

/// Ordered record of executed differentiable operations.
///
/// Operations append themselves during the forward pass, so the record is
/// topologically ordered by construction. A tape is single-owner: one
/// forward/backward cycle per model step.
#[derive(Default)]
pub struct Tape {
    ops: RefCell<Vec<TapeOp>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.borrow().is_empty()
    }

    pub(crate) fn record(&self, output: &Tensor, pull: Box<dyn Fn()>) {
        self.ops.borrow_mut().push(TapeOp {
            output: output.clone(),
            pull,
        });
    }
}

/// Propagates gradients from a scalar loss back through the tape.
///
/// Visits each recorded operation exactly once, in reverse execution order;
/// a tensor feeding several operations receives the sum of their
/// contributions. Branches that did not reach the loss carry no gradient and
/// are skipped.
pub fn backward(loss: &Tensor, tape: &Tape) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    let ops = tape.ops.borrow();
    if !ops.iter().any(|op| op.output.same_storage(loss)) {
        return Err(TensorError::LossNotOnTape);
    }
    loss.set_grad(vec![1.0]);
    for op in ops.iter().rev() {
        (op.pull)();
    }
    Ok(())
}
