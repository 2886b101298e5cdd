use std::collections::BTreeMap;

use super::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heavy-ball SGD state with coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub learning_rate: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: BTreeMap<ParamId, Tensor<S>>,
    lr_multipliers: BTreeMap<ParamId, S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(learning_rate: S, momentum: S, weight_decay: S) -> Result<Self> {
        if !(learning_rate > S::zero() && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::invalid(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay >= S::zero() && weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            lr_multipliers: BTreeMap::new(),
        })
    }

    /// Scales the learning rate of one parameter.
    pub fn set_lr_multiplier(&mut self, id: ParamId, factor: S) {
        self.lr_multipliers.insert(id, factor);
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.velocity.get(&id)
    }
}

/// One step of `v ← μ·v − lr·(g + wd·w); w ← w + v` for every trainable
/// parameter. Frozen parameters and masked-out entries are not touched.
///
/// All gradients are validated before any parameter is updated.
pub fn sgd_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<S>>,
    state: &mut OptimizerState<S>,
) -> Result<()> {
    let mut params: Vec<&mut Parameter<S>> = params.into_iter().filter(|p| p.trainable()).collect();
    for p in &params {
        if !p.grad().all_finite() {
            return Err(Error::NonFiniteGradient(p.id()));
        }
    }
    for p in params.iter_mut() {
        let lr = state.learning_rate
            * state
                .lr_multipliers
                .get(&p.id())
                .copied()
                .unwrap_or(S::one());
        let (mu, wd) = (state.momentum, state.weight_decay);
        let v = state
            .velocity
            .entry(p.id())
            .or_insert_with(|| Tensor::zeros(p.value().shape()));
        if v.shape() != p.value().shape() {
            *v = Tensor::zeros(p.value().shape());
        }
        let grad = p.grad().data().to_vec();
        let mask = p.update_mask().map(<[bool]>::to_vec);
        let w = p.value_mut();
        for (i, (wi, vi)) in w.iter_mut().zip(v.data_mut()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            *vi = mu * *vi - lr * (grad[i] + wd * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(w: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(ParamId(0), Tensor::vector(&[w]));
        p.set_grad(Tensor::vector(&[g])).unwrap();
        p
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = param(1.0, 2.0);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step([&mut p], &mut st).unwrap();
        assert!((p.value().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = param(0.0, 1.0);
        let mut st = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step([&mut p], &mut st).unwrap();
        assert!((p.value().data()[0] + 0.1).abs() < 1e-15);
        sgd_step([&mut p], &mut st).unwrap();
        assert!((st.velocity(ParamId(0)).unwrap().data()[0] + 0.19).abs() < 1e-15);
        assert!((p.value().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_coupled() {
        // v = -0.1 * (0 + 0.5 * 2) = -0.1
        let mut p = param(2.0, 0.0);
        let mut st = OptimizerState::new(0.1, 0.0, 0.5).unwrap();
        sgd_step([&mut p], &mut st).unwrap();
        assert!((p.value().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut p = param(0.123456789, 7.0);
        p.set_trainable(false);
        let before = p.value().data()[0].to_bits();
        let mut st = OptimizerState::new(0.5, 0.9, 0.1).unwrap();
        for _ in 0..5 {
            sgd_step([&mut p], &mut st).unwrap();
        }
        assert_eq!(p.value().data()[0].to_bits(), before);
    }

    #[test]
    fn masked_entries_are_untouched() {
        let mut p = Parameter::new(ParamId(1), Tensor::vector(&[1.0f64, 1.0]));
        p.set_grad(Tensor::vector(&[1.0, 1.0])).unwrap();
        p.set_update_mask(Some(vec![false, true])).unwrap();
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step([&mut p], &mut st).unwrap();
        assert_eq!(p.value().data()[0], 1.0);
        assert!((p.value().data()[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = param(1.0, f64::NAN);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        let err = sgd_step([&mut p], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ParamId(0))));
        assert_eq!(p.value().data()[0], 1.0);
    }

    #[test]
    fn lr_multiplier_scales_step() {
        let mut p = param(1.0, 1.0);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        st.set_lr_multiplier(ParamId(0), 0.5);
        sgd_step([&mut p], &mut st).unwrap();
        assert!((p.value().data()[0] - 0.95).abs() < 1e-15);
    }
}
