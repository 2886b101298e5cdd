use std::collections::BTreeMap;

use super::{HasParameters, ParamId, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-5)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the largest error occurred.
    pub worst: Option<(ParamId, usize)>,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares tape gradients of `loss` against central finite differences for
/// every entry of every trainable parameter of `model`.
pub fn gradient_check<S, M, F>(model: &mut M, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    M: HasParameters<S>,
    F: Fn(&M, &mut Tape<S>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let analytic: BTreeMap<ParamId, Tensor<S>> = model
        .parameters()
        .into_iter()
        .filter(|p| p.trainable())
        .map(|p| {
            let g = grads
                .param(p.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
            (p.id(), g)
        })
        .collect();
    compare_gradients(model, loss, &analytic, tolerance)
}

/// Checks a supplied analytic gradient table against finite differences.
/// Parameters missing from `analytic` are treated as having zero gradient.
pub fn compare_gradients<S, M, F>(
    model: &mut M,
    loss: F,
    analytic: &BTreeMap<ParamId, Tensor<S>>,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    M: HasParameters<S>,
    F: Fn(&M, &mut Tape<S>) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(m, &mut tape)?;
        Ok(tape.value(v).item()?.as_f64())
    };
    let h = S::lit(FD_STEP);
    let targets: Vec<(usize, ParamId, usize)> = model
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .map(|(i, p)| (i, p.id(), p.value().len()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        tolerance,
        passed: true,
    };
    for (slot, id, len) in targets {
        for e in 0..len {
            let orig = model.parameters()[slot].value().data()[e];
            model.parameters_mut()[slot].value_mut()[e] = orig + h;
            let plus = eval(model)?;
            model.parameters_mut()[slot].value_mut()[e] = orig - h;
            let minus = eval(model)?;
            model.parameters_mut()[slot].value_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[e].as_f64());
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((id, e));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;

    fn dense_net() -> Vec<Parameter<f64>> {
        let w1 = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect(),
        )
        .unwrap();
        let b1 = Tensor::vector(&[0.1, -0.2, 0.05, 0.3]);
        let w2 = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| ((i * 5 % 13) as f64 - 6.0) / 9.0).collect(),
        )
        .unwrap();
        let b2 = Tensor::vector(&[0.0, 0.1, -0.1]);
        [w1, b1, w2, b2]
            .into_iter()
            .enumerate()
            .map(|(i, t)| Parameter::new(ParamId(i as u64), t))
            .collect()
    }

    fn ce_loss(ps: &[Parameter<f64>], tape: &mut Tape<f64>, flip: bool) -> Result<Var> {
        let x =
            tape.constant(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]).unwrap());
        let w1 = tape.param(&ps[0]);
        let b1 = tape.param(&ps[1]);
        let w2 = tape.param(&ps[2]);
        let b2 = tape.param(&ps[3]);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, w2)?;
        let z = tape.add_bias(z, b2)?;
        let p = tape.softmax(z)?;
        let lp = tape.log(p)?;
        let t = tape.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let prod = tape.mul(t, lp)?;
        let s = tape.sum(prod)?;
        tape.scale(s, if flip { 0.5 } else { -0.5 })
    }

    #[test]
    fn two_layer_dense_passes() {
        let mut net = dense_net();
        let r = gradient_check(&mut net, |m, t| ce_loss(m, t, false), 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.entries_checked, 12 + 4 + 12 + 3);
    }

    #[test]
    fn sign_flipped_backward_fails_with_error_near_two() {
        let mut net = dense_net();
        // analytic gradient of the negated loss = sign-flipped backward rule
        let mut tape = Tape::new();
        let out = ce_loss(&net, &mut tape, true).unwrap();
        let grads = tape.backward(out).unwrap();
        let r =
            compare_gradients(&mut net, |m, t| ce_loss(m, t, false), grads.params(), 1e-4).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn zero_weights_symmetric_input() {
        let mut net: Vec<Parameter<f64>> = vec![
            Parameter::new(ParamId(0), Tensor::zeros(&[2, 2])),
            Parameter::new(ParamId(1), Tensor::zeros(&[2])),
        ];
        let loss = |ps: &Vec<Parameter<f64>>, tape: &mut Tape<f64>| {
            let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
            let w = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let z = tape.matmul(x, w)?;
            let z = tape.add_bias(z, b)?;
            let p = tape.softmax(z)?;
            let lp = tape.log(p)?;
            let t = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
            let prod = tape.mul(t, lp)?;
            let s = tape.sum(prod)?;
            tape.scale(s, -1.0)
        };
        let r = gradient_check(&mut net, loss, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
