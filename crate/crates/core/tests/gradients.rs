use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcgan::autodiff::{grad_check, grad_check_fn, NdArray, OpAttrs, OpKind, Tape};

fn case(kind: OpKind) -> (Vec<Vec<usize>>, OpAttrs) {
    let mut attrs = OpAttrs::default();
    let shapes = match kind {
        OpKind::MatMul => vec![vec![3, 5], vec![5, 4]],
        OpKind::BiasAdd => vec![vec![4, 6], vec![6]],
        OpKind::Conv2d => vec![vec![5, 6, 3], vec![3, 3, 3, 4]],
        OpKind::UpsampleNearest | OpKind::UpsampleBilinear => {
            attrs.size = Some((7, 9));
            vec![vec![3, 4, 2]]
        }
        OpKind::Concat => {
            attrs.axis = Some(1);
            vec![vec![3, 2], vec![3, 4]]
        }
        OpKind::Reshape => {
            attrs.shape = Some(vec![6, 2]);
            vec![vec![3, 4]]
        }
        OpKind::Dropout => {
            attrs.rate = Some(0.3);
            vec![vec![4, 5]]
        }
        OpKind::Add | OpKind::Mul => vec![vec![4, 5], vec![4, 1]],
        _ => vec![vec![4, 6]],
    };
    (shapes, attrs)
}

#[test]
fn every_catalog_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in OpKind::ALL {
        let (shapes, attrs) = case(kind);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            worst = worst.max(grad_check(kind, &shapes, &attrs, 1e-5, &mut rng).unwrap());
        }
        println!("{kind:>18}: max rel err {worst:.3e}");
        assert!(worst < 1e-5, "{kind}: {worst}");
    }
}

#[test]
fn matmul_and_conv_within_1e6_at_eps_1e4() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [OpKind::MatMul, OpKind::Conv2d] {
        let (shapes, attrs) = case(kind);
        let err = grad_check(kind, &shapes, &attrs, 1e-4, &mut rng).unwrap();
        assert!(err < 1e-6, "{kind}: {err}");
    }
}

#[test]
fn softmax_attention_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<NdArray<f64>> = tcgan::autodiff::sample_inputs(
        OpKind::MatMul,
        &[vec![4, 6], vec![6, 6], vec![6, 6], vec![6, 6]],
        1e-4,
        &mut rng,
    );
    let err = grad_check_fn(
        |_, v| {
            let (x, wq, wk, wv) = (v[0], v[1], v[2], v[3]);
            let q = x.matmul(wq)?;
            let k = x.matmul(wk)?;
            let a = q.matmul(k.t()?)?.scale(1.0 / 6f64.sqrt()).softmax()?;
            a.matmul(x.matmul(wv)?)
        },
        &inputs,
        1e-5,
        3,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

/// Gradient of a gradient norm: the path the gradient penalty takes.
#[test]
fn double_backward_through_conv_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = tcgan::autodiff::sample_inputs(
        OpKind::Conv2d,
        &[vec![5, 5, 2], vec![3, 3, 2, 3], vec![3, 3, 3, 1]],
        1e-4,
        &mut rng,
    );
    let err = grad_check_fn(
        |tape: &Tape<f64>, v| {
            let x = v[0];
            let h = x.conv2d(v[1])?;
            let (m, var) = h.reshape(&[25, 3])?.t()?.layer_stats()?;
            let h = h
                .reshape(&[25, 3])?
                .t()?
                .sub(m)?
                .div(var.add_scalar(1e-5).sqrt())?
                .t()?
                .reshape(&[5, 5, 3])?
                .leaky_relu(0.2);
            let d = h.conv2d(v[2])?.mean();
            let g = tape.grad(d, &[x], true)?[0].unwrap();
            Ok(g.norm().add_scalar(-1.0).square())
        },
        &inputs,
        1e-5,
        9,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

/// Critic-parameter gradient of the gradient penalty, against central
/// differences on every weight of a narrow critic.
#[test]
fn gradient_penalty_parameter_gradient() {
    use tcgan::critic::{Critic, CriticConfig};
    use tcgan::nn::{normal, Module};
    use tcgan::training::gradient_penalty;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = CriticConfig {
        width: 3,
        layers: 3,
        instance_norm: true,
    };
    let mut critic = Critic::<f64>::new(cfg, &mut rng).unwrap();
    let real: NdArray<f64> = normal(&[11, 12, 3], 0.5, &mut rng);
    let fake: NdArray<f64> = normal(&[11, 12, 3], 0.5, &mut rng);
    let (eps, lambda) = (0.3, 0.1);

    let tape = Tape::new();
    let gp = gradient_penalty(&tape, &critic, &real, &fake, eps, lambda).unwrap();
    let grads = tape.backward(gp).unwrap();
    let analytic: Vec<NdArray<f64>> = critic
        .named_params()
        .into_iter()
        .map(|(_, p)| grads.for_param(p).cloned().unwrap_or_else(|| NdArray::zeros(p.value.raw_dim())))
        .collect();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for k in 0..n_params {
        for e in 0..analytic[k].len() {
            let mut eval = |delta: f64| {
                critic.params_mut()[k].value.as_slice_mut().unwrap()[e] += delta;
                let t = Tape::new();
                let v = gradient_penalty(&t, &critic, &real, &fake, eps, lambda).unwrap().item();
                critic.params_mut()[k].value.as_slice_mut().unwrap()[e] -= delta;
                v
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[k].as_slice().unwrap()[e];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-6));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}
