//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward primitives append nodes to a [`Tape`]; [`Tape::backward`] replays
//! them in exact reverse order and returns a [`Gradients`] table keyed by
//! [`ParamId`]. Parameters live outside the tape: a forward pass copies their
//! values in, and the caller writes gradients back with
//! [`assign_gradients`].

mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use gradcheck::{compare_gradients, gradient_check, GradCheckReport, FD_STEP};
pub use optim::{sgd_step, OptimizerState};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable identifier of a parameter within one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u64);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A trainable tensor with its gradient buffer.
///
/// `update_mask`, when present, restricts optimizer updates to the entries
/// flagged `true`; the rest stay bit-identical exactly like a frozen
/// parameter.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    id: ParamId,
    value: Tensor<S>,
    grad: Tensor<S>,
    trainable: bool,
    update_mask: Option<Vec<bool>>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(id: ParamId, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id,
            value,
            grad,
            trainable: true,
            update_mask: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    /// Mutable access to the value. Shape changes must go through
    /// [`Parameter::replace_value`].
    pub fn value_mut(&mut self) -> &mut [S] {
        self.value.data_mut()
    }

    /// Replaces the value (possibly with a new shape) and resets the gradient.
    pub fn replace_value(&mut self, value: Tensor<S>) {
        self.grad = Tensor::zeros(value.shape());
        if self
            .update_mask
            .as_ref()
            .is_some_and(|m| m.len() != value.len())
        {
            self.update_mask = None;
        }
        self.value = value;
    }

    pub fn grad(&self) -> &Tensor<S> {
        &self.grad
    }

    pub fn set_grad(&mut self, grad: Tensor<S>) -> Result<()> {
        self.value.ensure_same_shape(&grad, "set_grad")?;
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn update_mask(&self) -> Option<&[bool]> {
        self.update_mask.as_deref()
    }

    pub fn set_update_mask(&mut self, mask: Option<Vec<bool>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.value.len() {
                return Err(Error::Shape {
                    op: "update_mask",
                    left: self.value.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        self.update_mask = mask;
        Ok(())
    }
}

/// Anything that owns a fixed, ordered set of parameters.
pub trait HasParameters<S> {
    fn parameters(&self) -> Vec<&Parameter<S>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>>;
}

impl<S> HasParameters<S> for Vec<Parameter<S>> {
    fn parameters(&self) -> Vec<&Parameter<S>> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.iter_mut().collect()
    }
}

/// Writes gradients from a backward pass into parameters.
///
/// Trainable parameters receive their accumulated gradient, or zeros when the
/// loss does not reach them; frozen parameters always receive zeros.
pub fn assign_gradients<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<S>>,
    grads: &Gradients<S>,
) -> Result<()> {
    for p in params {
        match grads.param(p.id()) {
            Some(g) if p.trainable() => p.set_grad(g.clone())?,
            _ => p.zero_grad(),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_mask_length_is_checked() {
        let mut p = Parameter::new(ParamId(0), Tensor::<f64>::zeros(&[2, 2]));
        assert!(p.set_update_mask(Some(vec![true; 3])).is_err());
        assert!(p.set_update_mask(Some(vec![true; 4])).is_ok());
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let mut w = Parameter::new(ParamId(1), Tensor::vector(&[1.0f64, 2.0]));
        w.set_trainable(false);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let sq = tape.square(v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assign_gradients([&mut w], &grads).unwrap();
        assert_eq!(w.grad().data(), &[0.0, 0.0]);
    }
}
