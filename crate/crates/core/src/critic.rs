//! Fully convolutional patch critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::nn::{prefixed, Bind, Conv, InstanceNorm, Module, LEAKY_SLOPE};
use crate::scalar::Scalar;

/// Smallest input side: the receptive field of five 3x3 convolutions.
pub const MIN_SIDE: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub width: usize,
    pub layers: usize,
    pub instance_norm: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            width: 32,
            layers: 5,
            instance_norm: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Critic<T: Scalar> {
    pub cfg: CriticConfig,
    pub convs: Vec<Conv<T>>,
    /// One per hidden layer; unused when normalization is off.
    pub norms: Vec<InstanceNorm<T>>,
}

impl<T: Scalar> Critic<T> {
    pub fn new(cfg: CriticConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers < 2 || cfg.width == 0 {
            return Err(Error::Config(format!(
                "critic needs at least 2 layers and nonzero width, got {} x {}",
                cfg.layers, cfg.width
            )));
        }
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut norms = Vec::new();
        for l in 0..cfg.layers {
            let inp = if l == 0 { 3 } else { cfg.width };
            let out = if l + 1 == cfg.layers { 1 } else { cfg.width };
            convs.push(Conv::new(3, inp, out, rng));
            if l + 1 < cfg.layers {
                norms.push(InstanceNorm::new(cfg.width));
            }
        }
        Ok(Critic { cfg, convs, norms })
    }

    /// Score map `[H, W, 1]` for an `[H, W, 3]` image.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, img: Var<'t, T>, bind: Bind) -> Result<Var<'t, T>> {
        let s = img.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("critic", format!("expected [H, W, 3], got {s:?}")));
        }
        if s[0] < MIN_SIDE || s[1] < MIN_SIDE {
            return Err(Error::shape(
                "critic",
                format!("input {}x{} below {MIN_SIDE}x{MIN_SIDE}", s[0], s[1]),
            ));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let last = self.convs.len() - 1;
        let mut h = img;
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h, bind)?;
            if l < last {
                if self.cfg.instance_norm {
                    h = self.norms[l].forward(tape, h, bind)?;
                }
                h = h.leaky_relu(slope);
            }
        }
        Ok(h)
    }

    /// Mean of the score map.
    pub fn score<'t>(&self, tape: &'t Tape<T>, img: Var<'t, T>, bind: Bind) -> Result<Var<'t, T>> {
        Ok(self.forward(tape, img, bind)?.mean())
    }

    pub fn score_map(&self, img: &Image<T>) -> Result<Image<T>> {
        let tape = Tape::no_grad();
        Ok(self.forward(&tape, tape.constant(img.clone()), Bind::Constants)?.value().as_ref().clone())
    }

    pub fn score_of(&self, img: &Image<T>) -> Result<T> {
        let tape = Tape::no_grad();
        Ok(self.score(&tape, tape.constant(img.clone()), Bind::Constants)?.item())
    }

    /// The next stage's critic: a bit-equal, fully trainable copy.
    pub fn warm_start(&self) -> Self {
        let mut next = self.clone();
        next.set_trainable(true);
        next
    }
}

impl<T: Scalar> Module<T> for Critic<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut v = Vec::new();
        for (l, c) in self.convs.iter().enumerate() {
            v.extend(prefixed(&format!("conv{}", l + 1), c.named_params()));
            if self.cfg.instance_norm {
                if let Some(n) = self.norms.get(l) {
                    v.extend(prefixed(&format!("norm{}", l + 1), n.named_params()));
                }
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let norm = self.cfg.instance_norm;
        let mut v = Vec::new();
        let mut norms = self.norms.iter_mut();
        for c in self.convs.iter_mut() {
            v.extend(c.params_mut());
            if let Some(n) = norms.next() {
                if norm {
                    v.extend(n.params_mut());
                }
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic(norm: bool) -> Critic<f64> {
        let cfg = CriticConfig {
            instance_norm: norm,
            ..Default::default()
        };
        Critic::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn same_padding_shape() {
        let c = critic(true);
        let img = normal(&[25, 25, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(c.score_map(&img).unwrap().shape(), &[25, 25, 1]);
    }

    #[test]
    fn rejects_small_input() {
        let c = critic(true);
        let img = normal(&[10, 25, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(matches!(c.score_map(&img), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let mut c = critic(true);
        for p in c.params_mut() {
            p.value.fill(0.0);
        }
        let img = normal(&[12, 12, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(c.score_map(&img).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(c.score_of(&img).unwrap(), 0.0);
    }

    #[test]
    fn score_is_mean_of_map() {
        let c = critic(true);
        let img = normal(&[13, 17, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let map = c.score_map(&img).unwrap();
        let mean = map.sum() / map.len() as f64;
        assert!((c.score_of(&img).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn warm_start_is_bit_equal_and_trainable() {
        let mut c = critic(true);
        c.set_trainable(false);
        let next = c.warm_start();
        for ((_, a), (_, b)) in c.named_params().iter().zip(next.named_params()) {
            assert_eq!(a.value, b.value);
            assert!(b.trainable);
        }
        let img = normal(&[12, 14, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(c.score_map(&img).unwrap(), next.score_map(&img).unwrap());
    }

    #[test]
    fn parameter_count_matches_layout() {
        let c = critic(true);
        let convs = (27 * 32 + 32) + 3 * (288 * 32 + 32) + (288 + 1);
        assert_eq!(c.param_count(), convs + 4 * 64);
        assert_eq!(critic(false).param_count(), convs);
    }
}
