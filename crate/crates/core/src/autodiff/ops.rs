//! Name-addressed entry point to the differentiable operation catalog.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::tape::{concat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    BiasAdd,
    Conv2d,
    UpsampleNearest,
    UpsampleBilinear,
    LeakyRelu,
    Tanh,
    Gelu,
    Softmax,
    LayerStats,
    Dropout,
    Reshape,
    Concat,
    Add,
    Mul,
    Mean,
    Sum,
    Square,
    Sqrt,
    Norm,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::BiasAdd,
        OpKind::Conv2d,
        OpKind::UpsampleNearest,
        OpKind::UpsampleBilinear,
        OpKind::LeakyRelu,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerStats,
        OpKind::Dropout,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Conv2d => "conv2d",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerStats => "layer_stats",
            OpKind::Dropout => "dropout",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Norm => "norm",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Attributes consumed by some operation kinds; unused fields are ignored.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    /// Leaky-relu negative slope (default 0.2).
    pub slope: Option<f64>,
    /// Concat axis.
    pub axis: Option<usize>,
    /// Reshape target.
    pub shape: Option<Vec<usize>>,
    /// Upsample target `(h, w)`.
    pub size: Option<(usize, usize)>,
    /// Dropout rate (default 0).
    pub rate: Option<f64>,
}

fn arity(kind: OpKind, n: usize, want: usize) -> Result<()> {
    if n == want {
        Ok(())
    } else {
        Err(Error::shape(
            kind.name(),
            format!("expected {want} inputs, got {n}"),
        ))
    }
}

fn need<V: Clone>(kind: OpKind, v: &Option<V>, what: &str) -> Result<V> {
    v.clone()
        .ok_or_else(|| Error::shape(kind.name(), format!("missing attribute `{what}`")))
}

/// Applies `kind` to `inputs`, recording it on their tape.
///
/// `layer_stats` returns per-row mean and variance side by side, shape `[.., 2]`.
pub fn forward_op<'t, T: Scalar, R: Rng + ?Sized>(
    kind: OpKind,
    inputs: &[Var<'t, T>],
    attrs: &OpAttrs,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let n = inputs.len();
    let x = |i: usize| inputs[i];
    match kind {
        OpKind::Concat => {
            let axis = need(kind, &attrs.axis, "axis")?;
            concat(inputs, axis)
        }
        OpKind::MatMul => {
            arity(kind, n, 2)?;
            x(0).matmul(x(1))
        }
        OpKind::BiasAdd => {
            arity(kind, n, 2)?;
            let (xs, bs) = (x(0).shape(), x(1).shape());
            if bs.len() != 1 || xs.last() != bs.last() {
                return Err(Error::shape(
                    kind.name(),
                    format!("bias {bs:?} does not match trailing axis of {xs:?}"),
                ));
            }
            x(0).add(x(1))
        }
        OpKind::Add => {
            arity(kind, n, 2)?;
            x(0).add(x(1))
        }
        OpKind::Mul => {
            arity(kind, n, 2)?;
            x(0).mul(x(1))
        }
        OpKind::Conv2d => {
            arity(kind, n, 2)?;
            x(0).conv2d(x(1))
        }
        OpKind::UpsampleNearest | OpKind::UpsampleBilinear => {
            arity(kind, n, 1)?;
            let (h, w) = need(kind, &attrs.size, "size")?;
            if kind == OpKind::UpsampleNearest {
                x(0).upsample_nearest(h, w)
            } else {
                x(0).upsample_bilinear(h, w)
            }
        }
        OpKind::Reshape => {
            arity(kind, n, 1)?;
            x(0).reshape(&need(kind, &attrs.shape, "shape")?)
        }
        OpKind::Dropout => {
            arity(kind, n, 1)?;
            x(0).dropout(attrs.rate.unwrap_or(0.0), rng)
        }
        OpKind::LayerStats => {
            arity(kind, n, 1)?;
            let (m, v) = x(0).layer_stats()?;
            let last = m.shape().len() - 1;
            concat(&[m, v], last)
        }
        OpKind::Softmax => {
            arity(kind, n, 1)?;
            x(0).softmax()
        }
        _ => {
            arity(kind, n, 1)?;
            let a = x(0);
            Ok(match kind {
                OpKind::LeakyRelu => a.leaky_relu(T::lit(attrs.slope.unwrap_or(0.2))),
                OpKind::Tanh => a.tanh(),
                OpKind::Gelu => a.gelu(),
                OpKind::Mean => a.mean(),
                OpKind::Sum => a.sum(),
                OpKind::Square => a.square(),
                OpKind::Sqrt => a.sqrt(),
                OpKind::Norm => a.norm(),
                _ => unreachable!("handled above"),
            })
        }
    }
}
