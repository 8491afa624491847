//! Layers shared by the generator and the critic.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{NdArray, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

/// How a module's parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Honor each parameter's `trainable` flag.
    Params,
    /// Bind every parameter as a constant, e.g. the critic during a generator step.
    Constants,
}

impl Bind {
    pub fn bind<'t, T: Scalar>(self, tape: &'t Tape<T>, p: &Parameter<T>) -> Var<'t, T> {
        match self {
            Bind::Params => tape.param(p),
            Bind::Constants => tape.param_const(p),
        }
    }
}

/// Anything that owns parameters, listed in a fixed declaration order.
pub trait Module<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T: Scalar>(
    prefix: &str,
    inner: Vec<(String, &'a Parameter<T>)>,
) -> Vec<(String, &'a Parameter<T>)> {
    inner
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}

pub fn xavier_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> NdArray<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    NdArray::from_shape_fn(IxDyn(shape), |_| T::lit(dist.sample(rng)))
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> NdArray<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    NdArray::from_shape_fn(IxDyn(shape), |_| T::lit(dist.sample(rng)))
}

/// `x W + b` on `[rows, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Parameter::new(xavier_uniform(&[inp, out], inp, out, rng), true),
            bias: Parameter::zeros(&[out]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(tape.param(&self.weight))?.add(tape.param(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Same-padded, stride-1 convolution with bias on `[H, W, C]` maps.
#[derive(Debug, Clone)]
pub struct Conv<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(k: usize, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Conv {
            weight: Parameter::new(
                xavier_uniform(&[k, k, inp, out], k * k * inp, k * k * out, rng),
                true,
            ),
            bias: Parameter::zeros(&[out]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, bind: Bind) -> Result<Var<'t, T>> {
        x.conv2d(bind.bind(tape, &self.weight))?
            .add(bind.bind(tape, &self.bias))
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel normalization over the spatial axes of one `[H, W, C]` map,
/// with a learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Parameter::new(NdArray::from_elem(IxDyn(&[channels]), T::one()), true),
            beta: Parameter::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, bind: Bind) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("instance_norm", format!("{s:?}")));
        }
        let flat = x.reshape(&[s[0] * s[1], s[2]])?;
        let mean = flat.mean_axis(0)?;
        let centered = flat.sub(mean)?;
        let var = centered.square().mean_axis(0)?;
        let normed = centered.div(var.add_scalar(T::lit(self.eps)).sqrt())?;
        normed
            .mul(bind.bind(tape, &self.gamma))?
            .add(bind.bind(tape, &self.beta))?
            .reshape(&s)
    }
}

impl<T: Scalar> Module<T> for InstanceNorm<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::<f64>::new();
        let x = tape.constant(normal::<f64>(&[6, 5, 3], 3.0, &mut rng).mapv(|v| v + 2.0));
        let y = InstanceNorm::new(3).forward(&tape, x, Bind::Params).unwrap().value();
        for c in 0..3 {
            let ch: Vec<f64> = y.iter().skip(c).step_by(3).copied().collect();
            let m = ch.iter().sum::<f64>() / 30.0;
            let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 30.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_binding_yields_no_param_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::<f64>::new(3, 2, 2, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(normal(&[4, 4, 2], 1.0, &mut rng), true);
        let loss = conv.forward(&tape, x, Bind::Constants).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.for_param(&conv.weight).is_none());
        assert!(g.wrt(x).is_some());
    }
}
