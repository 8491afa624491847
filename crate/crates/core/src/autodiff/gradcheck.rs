//! Central finite-difference verification of analytic gradients.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::kernels::NdArray;
use super::ops::{forward_op, OpAttrs, OpKind};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Smallest denominator in the relative error.
const REL_FLOOR: f64 = 1e-8;

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> NdArray<f64> {
    NdArray::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}

/// Evaluates `f` and reduces its output to a scalar with a fixed random
/// projection so every output element contributes. Inputs are always tracked
/// so that `f` may itself differentiate with respect to them.
fn scalarized<'t, F>(
    tape: &'t Tape<f64>,
    f: &F,
    inputs: &[NdArray<f64>],
    projection: &mut Option<NdArray<f64>>,
    seed: u64,
) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(tape, &vars)?;
    let proj = projection.get_or_insert_with(|| {
        gaussian(&out.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37))
    });
    let loss = out.mul(tape.constant(proj.clone()))?.sum();
    Ok((loss, vars))
}

/// Maximum over all input elements of `|analytic - numeric| / max(|numeric|, 1e-8)`,
/// with the numeric derivative taken by central differences of step `eps`.
pub fn grad_check_fn<F>(f: F, inputs: &[NdArray<f64>], eps: f64, seed: u64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    let mut proj = None;
    let tape = Tape::new();
    let (loss, vars) = scalarized(&tape, &f, inputs, &mut proj, seed)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[NdArray<f64>], proj: &mut Option<NdArray<f64>>| -> Result<f64> {
        let t = Tape::new();
        let (l, _) = scalarized(&t, &f, xs, proj, seed)?;
        Ok(l.item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(inputs[k].raw_dim()));
        for e in 0..inputs[k].len() {
            let orig = inputs[k].as_slice().expect("standard")[e];
            work[k].as_slice_mut().expect("standard")[e] = orig + eps;
            let up = eval(&work, &mut proj)?;
            work[k].as_slice_mut().expect("standard")[e] = orig - eps;
            let down = eval(&work, &mut proj)?;
            work[k].as_slice_mut().expect("standard")[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_slice().expect("standard")[e];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(REL_FLOOR));
        }
    }
    Ok(worst)
}

/// Draws inputs suitable for `kind` at `shapes`.
///
/// Inputs are resampled while any leaky-relu or norm kink lies within `10 * eps`
/// of a sample, and `sqrt` inputs are kept positive.
pub fn sample_inputs(kind: OpKind, shapes: &[Vec<usize>], eps: f64, rng: &mut impl Rng) -> Vec<NdArray<f64>> {
    loop {
        let mut xs: Vec<_> = shapes.iter().map(|s| gaussian(s, rng)).collect();
        if kind == OpKind::Sqrt {
            for x in &mut xs {
                x.mapv_inplace(|v| v.abs() + 0.5);
            }
        }
        let near_kink = kind == OpKind::LeakyRelu
            && xs.iter().flat_map(|x| x.iter()).any(|v| v.abs() < 10.0 * eps);
        if !near_kink {
            return xs;
        }
    }
}

/// Finite-difference check of one catalog operation at random inputs of `shapes`.
pub fn grad_check(
    kind: OpKind,
    shapes: &[Vec<usize>],
    attrs: &OpAttrs,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let inputs = sample_inputs(kind, shapes, eps, rng);
    let seed = rng.random();
    // Dropout masks must be identical across every evaluation.
    let mask_seed: u64 = rng.random();
    grad_check_fn(
        move |_tape, xs| {
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            forward_op(kind, xs, attrs, &mut r)
        },
        &inputs,
        eps,
        seed,
    )
}
