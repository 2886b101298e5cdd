use rand::{Rng, RngCore};

use crate::autodiff::{ParamId, Parameter, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode. Dropout draws its masks from the rng in train mode
/// and is the identity in eval mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub enum Layer<S> {
    /// `x·W + b` with `W: [in, out]`.
    Dense {
        weight: Parameter<S>,
        bias: Parameter<S>,
    },
    /// Valid stride-1 convolution with `kernel: [out, in, kh, kw]`.
    Conv2d {
        kernel: Parameter<S>,
        bias: Parameter<S>,
    },
    Relu,
    Dropout(f64),
    MaxPool2x2,
    Flatten,
}

impl<S: Scalar> Layer<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match self {
            Layer::Dense { weight, bias } => {
                let w = tape.param(weight);
                let b = tape.param(bias);
                let z = tape.matmul(x, w)?;
                tape.add_bias(z, b)
            }
            Layer::Conv2d { kernel, bias } => {
                let k = tape.param(kernel);
                let b = tape.param(bias);
                let z = tape.conv2d(x, k)?;
                tape.add_bias(z, b)
            }
            Layer::Relu => tape.relu(x),
            Layer::Dropout(p) => match mode {
                Mode::Eval => tape.dropout(x, *p, None),
                Mode::Train(rng) => tape.dropout(x, *p, Some(&mut **rng)),
            },
            Layer::MaxPool2x2 => tape.maxpool2x2(x),
            Layer::Flatten => tape.flatten(x),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense { .. })
    }

    /// Output width of a dense layer.
    pub fn dense_out(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => Some(weight.value().shape()[1]),
            _ => None,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter<S>> {
        match self {
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, bias } => vec![kernel, bias],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        match self {
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, bias } => vec![kernel, bias],
            _ => Vec::new(),
        }
    }

    /// Copy with the same values under newly allocated ids; the copy is
    /// trainable and unmasked.
    pub(crate) fn with_fresh_ids(&self, next_id: &mut u64) -> Self {
        let mut fresh = |p: &Parameter<S>| {
            let q = Parameter::new(ParamId(*next_id), p.value().clone());
            *next_id += 1;
            q
        };
        match self {
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: fresh(weight),
                bias: fresh(bias),
            },
            Layer::Conv2d { kernel, bias } => Layer::Conv2d {
                kernel: fresh(kernel),
                bias: fresh(bias),
            },
            other => other.clone(),
        }
    }
}

/// Uniform samples in `±√(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut dyn RngCore,
) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data length agree")
}
