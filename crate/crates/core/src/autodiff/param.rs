use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{IxDyn, Zip};

use super::kernels::NdArray;
use crate::scalar::Scalar;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

/// Process-unique handle used to match a parameter with its tape binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
struct Moments<T> {
    m: NdArray<T>,
    v: NdArray<T>,
    t: i32,
}

/// A learnable array with its accumulated gradient.
///
/// Cloning yields an independent parameter (new id, no optimizer state) holding
/// bit-identical values.
#[derive(Debug)]
pub struct Parameter<T: Scalar> {
    id: ParamId,
    pub value: NdArray<T>,
    pub grad: NdArray<T>,
    pub trainable: bool,
    moments: Option<Moments<T>>,
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Parameter::new(self.value.clone(), self.trainable)
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: NdArray<T>, trainable: bool) -> Self {
        let grad = NdArray::zeros(value.raw_dim());
        Parameter {
            id: ParamId::fresh(),
            value,
            grad,
            trainable,
            moments: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Parameter::new(NdArray::zeros(IxDyn(shape)), true)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, g: &NdArray<T>) {
        assert_eq!(g.shape(), self.value.shape(), "gradient shape");
        match (self.grad.as_slice_mut(), g.as_slice()) {
            (Some(dst), Some(src)) => {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            _ => self.grad += g,
        }
    }

    /// Drops optimizer moments, e.g. when a new training stage opens.
    pub fn reset_optimizer(&mut self) {
        self.moments = None;
    }
}

/// Adam with bias-corrected moments; state lives on each parameter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every trainable parameter. Frozen parameters are
    /// skipped even when their gradient is non-zero.
    pub fn step<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, lr, eps) = (T::one(), T::lit(self.lr), T::lit(self.eps));
        for p in params {
            if !p.trainable {
                continue;
            }
            let dim = p.value.raw_dim();
            let st = p.moments.get_or_insert_with(|| Moments {
                m: NdArray::zeros(dim.clone()),
                v: NdArray::zeros(dim),
                t: 0,
            });
            st.t += 1;
            let c1 = one - b1.powi(st.t);
            let c2 = one - b2.powi(st.t);
            let step = lr / c1;
            let inv_c2 = one / c2;
            let (Some(x), Some(m), Some(v), Some(g)) = (
                p.value.as_slice_mut(),
                st.m.as_slice_mut(),
                st.v.as_slice_mut(),
                p.grad.as_slice(),
            ) else {
                Zip::from(&mut p.value)
                    .and(&mut st.m)
                    .and(&mut st.v)
                    .and(&p.grad)
                    .for_each(|x, m, v, &g| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *x -= step * *m / ((*v * inv_c2).sqrt() + eps);
                    });
                continue;
            };
            for i in 0..x.len() {
                let gi = g[i];
                let mi = b1 * m[i] + (one - b1) * gi;
                let vi = b2 * v[i] + (one - b2) * gi * gi;
                m[i] = mi;
                v[i] = vi;
                x[i] -= step * mi / ((vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn scalar_param(x: f64) -> Parameter<f64> {
        Parameter::new(arr1(&[x]).into_dyn(), true)
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = scalar_param(0.7);
        Adam::default().step([&mut p]);
        assert_eq!(p.value[[0]], 0.7);
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut p = scalar_param(0.7);
        p.trainable = false;
        p.grad[[0]] = 5.0;
        Adam::default().step([&mut p]);
        assert_eq!(p.value[[0]], 0.7);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // f(x) = x^2 at x = 1: gradient 2, bias-corrected ratio m/sqrt(v) = 1.
        let mut p = scalar_param(1.0);
        p.grad[[0]] = 2.0;
        let adam = Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam.step([&mut p]);
        assert!((p.value[[0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn clone_is_a_distinct_parameter() {
        let p = scalar_param(1.5);
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value, q.value);
    }
}
