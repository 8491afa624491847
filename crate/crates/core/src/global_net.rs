//! Transformer global network.
//!
//! A latent `z` is mapped to a token sequence `g` (`tokens x embed`). The
//! encoder input is the learned position embedding alone; `z` enters each
//! block only through self-modulated layer norm:
//!
//! ```text
//! sln(h, g) = alpha(g) + beta(g) * (h - mean(h)) / sqrt(var(h) + eps)
//! a         = drop(msa(sln(h, g)))
//! h'        = h + a + drop(mlp(sln(h + a, g)))
//! ```
//!
//! The final sequence is reshaped to a `tokens x tokens x channels` grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, NdArray, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, prefixed, xavier_uniform, Linear, Module, LEAKY_SLOPE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalNetConfig {
    /// Latent length `S`.
    pub latent: usize,
    /// Token count, also the grid side.
    pub tokens: usize,
    /// Grid channels `C`; the embedding width is `tokens * channels`.
    pub channels: usize,
    pub heads: usize,
    /// Number of encoder blocks `n`.
    pub blocks: usize,
    /// Feed-forward expansion ratio.
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub norm_eps: f64,
}

impl Default for GlobalNetConfig {
    fn default() -> Self {
        GlobalNetConfig {
            latent: 1024,
            tokens: 25,
            channels: 24,
            heads: 6,
            blocks: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            norm_eps: 1e-5,
        }
    }
}

impl GlobalNetConfig {
    pub fn embed(&self) -> usize {
        self.tokens * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent", self.latent),
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.embed() % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout is applied only in training mode and only when the rate is positive.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn apply<'t, T: Scalar>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => x.dropout(self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Inference-mode dropout.
pub fn no_dropout() -> Dropout<'static, rand_chacha::ChaCha8Rng> {
    Dropout { rate: 0.0, rng: None }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<T: Scalar> {
    pub alpha: Linear<T>,
    pub beta: Linear<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub proj: Linear<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(cfg: &GlobalNetConfig, rng: &mut impl Rng) -> Self {
        let l = cfg.embed();
        let sq = |rng: &mut _| Parameter::new(xavier_uniform(&[l, l], l, l, rng), true);
        EncoderBlock {
            alpha: Linear::new(l, l, rng),
            beta: Linear::new(l, l, rng),
            wq: sq(rng),
            wk: sq(rng),
            wv: sq(rng),
            proj: Linear::new(l, l, rng),
            ff1: Linear::new(l, cfg.mlp_ratio * l, rng),
            ff2: Linear::new(cfg.mlp_ratio * l, l, rng),
        }
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut v = prefixed("alpha", self.alpha.named_params());
        v.extend(prefixed("beta", self.beta.named_params()));
        v.push(("wq".into(), &self.wq));
        v.push(("wk".into(), &self.wk));
        v.push(("wv".into(), &self.wv));
        v.extend(prefixed("proj", self.proj.named_params()));
        v.extend(prefixed("ff1", self.ff1.named_params()));
        v.extend(prefixed("ff2", self.ff2.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.alpha.params_mut();
        v.extend(self.beta.params_mut());
        v.push(&mut self.wq);
        v.push(&mut self.wk);
        v.push(&mut self.wv);
        v.extend(self.proj.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct GlobalNet<T: Scalar> {
    pub cfg: GlobalNetConfig,
    pub mapping: Linear<T>,
    pub pos: Parameter<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

/// Softmax attention of one head: `softmax(q k^T / sqrt(d)) v`, plus the weights.
pub fn attention_head<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = q.shape()[1];
    let weights = q
        .matmul(k.t()?)?
        .scale(T::one() / T::lit(d as f64).sqrt())
        .softmax()?;
    Ok((weights.matmul(v)?, weights))
}

impl<T: Scalar> GlobalNet<T> {
    pub fn new(cfg: GlobalNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.embed();
        let mapping = Linear::new(cfg.latent, cfg.tokens * l, rng);
        let pos = Parameter::new(normal(&[cfg.tokens, l], 0.02, rng), true);
        let blocks = (0..cfg.blocks).map(|_| EncoderBlock::new(&cfg, rng)).collect();
        Ok(GlobalNet {
            cfg,
            mapping,
            pos,
            blocks,
        })
    }

    fn block(&self, k: usize) -> Result<&EncoderBlock<T>> {
        self.blocks
            .get(k)
            .ok_or_else(|| Error::Domain(format!("encoder block {k} of {}", self.blocks.len())))
    }

    /// Single linear layer plus leaky-relu, reshaped to `tokens x embed`.
    pub fn map_latent<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        if z.shape() != [self.cfg.latent] {
            return Err(Error::shape(
                "map_latent",
                format!("latent has shape {:?}, expected [{}]", z.shape(), self.cfg.latent),
            ));
        }
        let g = self
            .mapping
            .forward(tape, z.reshape(&[1, self.cfg.latent])?)?
            .leaky_relu(T::lit(LEAKY_SLOPE));
        g.reshape(&[self.cfg.tokens, self.cfg.embed()])
    }

    /// Self-modulated layer norm with block `k`'s affine maps.
    pub fn sln<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>, g: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
        let blk = self.block(k)?;
        let (mean, var) = h.layer_stats()?;
        let normed = h
            .sub(mean)?
            .div(var.add_scalar(T::lit(self.cfg.norm_eps)).sqrt())?;
        let alpha = blk.alpha.forward(tape, g)?;
        let beta = blk.beta.forward(tape, g)?;
        alpha.add(beta.mul(normed)?)
    }

    /// Multi-head self-attention of block `k`; also returns each head's weights.
    pub fn msa_with_weights<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        k: usize,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let blk = self.block(k)?;
        let l = self.cfg.embed();
        let heads = self.cfg.heads;
        if l % heads != 0 {
            return Err(Error::Config(format!("{l} not divisible by {heads} heads")));
        }
        let d = l / heads;
        let q = x.matmul(tape.param(&blk.wq))?;
        let kk = x.matmul(tape.param(&blk.wk))?;
        let v = x.matmul(tape.param(&blk.wv))?;
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (o, w) = attention_head(q.slice(1, h * d, d)?, kk.slice(1, h * d, d)?, v.slice(1, h * d, d)?)?;
            outs.push(o);
            weights.push(w);
        }
        let joined = if heads == 1 { outs[0] } else { concat(&outs, 1)? };
        Ok((blk.proj.forward(tape, joined)?, weights))
    }

    pub fn msa<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
        Ok(self.msa_with_weights(tape, x, k)?.0)
    }

    fn mlp<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
        let blk = self.block(k)?;
        let hidden = blk.ff1.forward(tape, x)?.gelu();
        blk.ff2.forward(tape, hidden)
    }

    pub fn encoder_block<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<T>,
        h: Var<'t, T>,
        g: Var<'t, T>,
        k: usize,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var<'t, T>> {
        let attn = drop.apply(self.msa(tape, self.sln(tape, h, g, k)?, k)?)?;
        let mid = h.add(attn)?;
        let ff = drop.apply(self.mlp(tape, self.sln(tape, mid, g, k)?, k)?)?;
        mid.add(ff)
    }

    /// `z` to a `tokens x tokens x channels` feature grid.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<T>,
        z: Var<'t, T>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var<'t, T>> {
        let g = self.map_latent(tape, z)?;
        let mut h = tape.param(&self.pos);
        for k in 0..self.blocks.len() {
            h = self.encoder_block(tape, h, g, k, drop)?;
        }
        h.reshape(&[self.cfg.tokens, self.cfg.tokens, self.cfg.channels])
    }

    /// Inference forward pass on a plain latent.
    pub fn grid(&self, z: &NdArray<T>) -> Result<NdArray<T>> {
        let tape = Tape::no_grad();
        let out = self.forward(&tape, tape.constant(z.clone()), &mut no_dropout())?;
        Ok(out.value().as_ref().clone())
    }
}

impl<T: Scalar> Module<T> for GlobalNet<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut v = prefixed("mapping", self.mapping.named_params());
        v.push(("pos".into(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.named_params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.mapping.params_mut();
        v.push(&mut self.pos);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GlobalNetConfig {
        GlobalNetConfig {
            latent: 16,
            tokens: 4,
            channels: 3,
            heads: 2,
            ..Default::default()
        }
    }

    fn net(cfg: GlobalNetConfig, seed: u64) -> GlobalNet<f64> {
        GlobalNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_latent_zero_bias_maps_to_zero() {
        let n = net(small(), 1);
        let tape = Tape::new();
        let z = tape.constant(NdArray::zeros(IxDyn(&[16])));
        let g = n.map_latent(&tape, z).unwrap();
        assert_eq!(g.shape(), vec![4, 12]);
        assert!(g.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_latent_length_rejected() {
        let n = net(small(), 1);
        let tape = Tape::new();
        let z = tape.constant(NdArray::zeros(IxDyn(&[15])));
        assert!(n.map_latent(&tape, z).is_err());
    }

    #[test]
    fn sln_hand_case() {
        // One token h = [1, 3]: mean 2, std 1 (eps aside); alpha = 0.5, beta = 2.
        let mut n = net(
            GlobalNetConfig {
                latent: 2,
                tokens: 1,
                channels: 2,
                heads: 1,
                norm_eps: 0.0,
                ..Default::default()
            },
            3,
        );
        let blk = &mut n.blocks[0];
        blk.alpha.weight.value.fill(0.0);
        blk.alpha.bias.value.fill(0.5);
        blk.beta.weight.value.fill(0.0);
        blk.beta.bias.value.fill(2.0);
        let tape = Tape::new();
        let h = tape.constant(arr2(&[[1.0, 3.0]]).into_dyn());
        let g = tape.constant(arr2(&[[0.3, -0.7]]).into_dyn());
        let out = n.sln(&tape, h, g, 0).unwrap().value();
        assert_eq!(out.as_slice().unwrap(), &[-1.5, 2.5]);
    }

    #[test]
    fn msa_rejects_indivisible_heads() {
        let cfg = GlobalNetConfig {
            heads: 5,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_grid_shape() {
        let n: GlobalNet<f32> = GlobalNet::new(GlobalNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(n.cfg.embed(), 600);
        let z = normal(&[1024], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::no_grad();
        let g = n.map_latent(&tape, tape.constant(z.clone())).unwrap();
        assert_eq!(g.shape(), vec![25, 600]);
        let grid = n.grid(&z).unwrap();
        assert_eq!(grid.shape(), &[25, 25, 24]);
        assert_eq!(grid, n.grid(&z).unwrap());
    }
}
