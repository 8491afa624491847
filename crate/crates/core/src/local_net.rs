//! Convolutional local networks and the multi-stage generator built on them.
//!
//! Stage `i` bilinearly upsamples the previous stage's features to its own
//! size, adds scaled Gaussian noise, and refines with three convolutions
//! around a residual path. Each stage has its own tanh RGB head; features, not
//! images, flow from one stage to the next.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NdArray, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::global_net::{no_dropout, Dropout, GlobalNet, GlobalNetConfig};
use crate::imageio::Image;
use crate::nn::{normal, prefixed, Bind, Conv, InstanceNorm, Module, LEAKY_SLOPE};
use crate::scalar::Scalar;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct LocalBlock<T: Scalar> {
    pub conv1: Conv<T>,
    pub norm1: InstanceNorm<T>,
    pub conv2: Conv<T>,
    pub norm2: InstanceNorm<T>,
    pub conv3: Conv<T>,
}

impl<T: Scalar> LocalBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        LocalBlock {
            conv1: Conv::new(KERNEL, channels, channels, rng),
            norm1: InstanceNorm::new(channels),
            conv2: Conv::new(KERNEL, channels, channels, rng),
            norm2: InstanceNorm::new(channels),
            conv3: Conv::new(KERNEL, channels, channels, rng),
        }
    }

    fn trunk<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let b = Bind::Params;
        let h = self.conv1.forward(tape, x, b)?;
        let h = self.norm1.forward(tape, h, b)?.leaky_relu(slope);
        let h = self.conv2.forward(tape, h, b)?;
        let h = self.norm2.forward(tape, h, b)?.leaky_relu(slope);
        self.conv3.forward(tape, h, b)
    }
}

impl<T: Scalar> Module<T> for LocalBlock<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut v = prefixed("conv1", self.conv1.named_params());
        v.extend(prefixed("norm1", self.norm1.named_params()));
        v.extend(prefixed("conv2", self.conv2.named_params()));
        v.extend(prefixed("norm2", self.norm2.named_params()));
        v.extend(prefixed("conv3", self.conv3.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv3.params_mut());
        v
    }
}

/// Features to a 3-channel image in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct RgbHead<T: Scalar> {
    pub conv: Conv<T>,
}

impl<T: Scalar> RgbHead<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        RgbHead {
            conv: Conv::new(KERNEL, channels, 3, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(tape, x, Bind::Params)?.tanh())
    }
}

impl<T: Scalar> Module<T> for RgbHead<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        prefixed("conv", self.conv.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.conv.params_mut()
    }
}

/// Per-stage noise amplitudes and the fixed reconstruction latent.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec<T: Scalar> {
    pub sigmas: Vec<f64>,
    pub z_rec: NdArray<T>,
}

/// Where a generation pass gets its randomness.
pub enum Source<'a, T: Scalar> {
    /// The given latent and fresh spatial noise at every stage.
    Random { z: NdArray<T>, rng: &'a mut ChaCha8Rng },
    /// The fixed reconstruction latent and no spatial noise.
    Reconstruction,
}

impl<'a, T: Scalar> Source<'a, T> {
    /// A random source with `z` drawn from `rng`.
    pub fn random(latent: usize, rng: &'a mut ChaCha8Rng) -> Self {
        let z = normal(&[latent], 1.0, rng);
        Source::Random { z, rng }
    }
}

pub fn gaussian_noise<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> NdArray<T> {
    NdArray::from_shape_fn(IxDyn(shape), |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone)]
pub struct GeneratorStack<T: Scalar> {
    pub global: GlobalNet<T>,
    pub blocks: Vec<LocalBlock<T>>,
    pub heads: Vec<RgbHead<T>>,
    pub noise: NoiseSpec<T>,
    /// Output size of every scheduled stage, built or not.
    pub sizes: Vec<(usize, usize)>,
    /// Number of stages whose training has completed.
    pub trained: usize,
}

impl<T: Scalar> GeneratorStack<T> {
    /// A one-stage generator: global network, first local block and head.
    pub fn new(cfg: GlobalNetConfig, sizes: Vec<(usize, usize)>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("generator needs at least one stage size".into()));
        }
        let global = GlobalNet::new(cfg, rng)?;
        let c = global.cfg.channels;
        let blocks = vec![LocalBlock::new(c, rng)];
        let heads = vec![RgbHead::new(c, rng)];
        let z_rec = normal(&[global.cfg.latent], 1.0, rng);
        Ok(GeneratorStack {
            global,
            blocks,
            heads,
            noise: NoiseSpec {
                sigmas: vec![1.0],
                z_rec,
            },
            sizes,
            trained: 0,
        })
    }

    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.global.cfg.channels
    }

    pub fn latent(&self) -> usize {
        self.global.cfg.latent
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.blocks.len() {
            return Err(Error::StageOutOfRange {
                stage,
                available: self.blocks.len(),
            });
        }
        Ok(())
    }

    pub fn size(&self, stage: usize) -> Result<(usize, usize)> {
        self.check_stage(stage)?;
        Ok(self.sizes[stage - 1])
    }

    /// One local block: upsample, add `sigma * noise`, residual conv trunk.
    pub fn local_block_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        features: Var<'t, T>,
        stage: usize,
        noise: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        self.check_stage(stage)?;
        let (h, w) = self.sizes[stage - 1];
        let up = features.upsample_bilinear(h, w)?;
        let input = match noise {
            Some(n) => {
                if n.shape() != up.shape() {
                    return Err(Error::shape(
                        "local_block",
                        format!("noise {:?} vs features {:?}", n.shape(), up.shape()),
                    ));
                }
                up.add(n.scale(T::lit(self.noise.sigmas[stage - 1])))?
            }
            None => up,
        };
        up.add(self.blocks[stage - 1].trunk(tape, input)?)
    }

    pub fn to_rgb<'t>(&self, tape: &'t Tape<T>, features: Var<'t, T>, stage: usize) -> Result<Var<'t, T>> {
        self.check_stage(stage)?;
        self.heads[stage - 1].forward(tape, features)
    }

    fn noise_for<'t>(&self, tape: &'t Tape<T>, stage: usize, src: &mut Source<'_, T>) -> Option<Var<'t, T>> {
        match src {
            Source::Random { rng, .. } => {
                let (h, w) = self.sizes[stage - 1];
                Some(tape.constant(gaussian_noise(&[h, w, self.channels()], *rng)))
            }
            Source::Reconstruction => None,
        }
    }

    /// Global grid for the source's latent.
    pub fn global_features<'t>(&self, tape: &'t Tape<T>, src: &Source<'_, T>) -> Result<Var<'t, T>> {
        let z = match src {
            Source::Random { z, .. } => z.clone(),
            Source::Reconstruction => self.noise.z_rec.clone(),
        };
        self.global.forward(tape, tape.constant(z), &mut no_dropout())
    }

    /// Like [`global_features`](Self::global_features) with training-mode dropout.
    pub fn global_features_train<'t>(
        &self,
        tape: &'t Tape<T>,
        src: &Source<'_, T>,
        drop_rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t, T>> {
        let z = match src {
            Source::Random { z, .. } => z.clone(),
            Source::Reconstruction => self.noise.z_rec.clone(),
        };
        let mut drop = Dropout {
            rate: self.global.cfg.dropout,
            rng: Some(drop_rng),
        };
        self.global.forward(tape, tape.constant(z), &mut drop)
    }

    /// Runs local blocks `from..=to` starting from `features`.
    pub fn run_blocks<'t>(
        &self,
        tape: &'t Tape<T>,
        mut features: Var<'t, T>,
        from: usize,
        to: usize,
        src: &mut Source<'_, T>,
    ) -> Result<Var<'t, T>> {
        self.check_stage(to)?;
        if from == 0 || from > to + 1 {
            return Err(Error::StageOutOfRange {
                stage: from,
                available: self.blocks.len(),
            });
        }
        for stage in from..=to {
            let noise = self.noise_for(tape, stage, src);
            features = self.local_block_forward(tape, features, stage, noise)?;
        }
        Ok(features)
    }

    /// Output features of stage `stage`.
    pub fn features<'t>(&self, tape: &'t Tape<T>, stage: usize, src: &mut Source<'_, T>) -> Result<Var<'t, T>> {
        self.check_stage(stage)?;
        let grid = self.global_features(tape, src)?;
        self.run_blocks(tape, grid, 1, stage, src)
    }

    /// Image at `stage` (only that stage's head is used).
    pub fn generate<'t>(&self, tape: &'t Tape<T>, stage: usize, src: &mut Source<'_, T>) -> Result<Var<'t, T>> {
        let f = self.features(tape, stage, src)?;
        self.to_rgb(tape, f, stage)
    }

    pub fn reconstruct(&self, stage: usize) -> Result<Image<T>> {
        let tape = Tape::no_grad();
        let img = self.generate(&tape, stage, &mut Source::Reconstruction)?;
        Ok(img.value().as_ref().clone())
    }

    pub fn sample(&self, stage: usize, rng: &mut ChaCha8Rng) -> Result<Image<T>> {
        let tape = Tape::no_grad();
        let mut src = Source::random(self.latent(), rng);
        let img = self.generate(&tape, stage, &mut src)?;
        Ok(img.value().as_ref().clone())
    }

    /// Freezes everything built so far and opens the next stage with a copy of
    /// the last block and head. The new stage's noise amplitude starts at 1.
    pub fn expand_stage(&mut self) -> Result<()> {
        let n = self.blocks.len();
        if self.trained < n {
            return Err(Error::Domain(format!(
                "stage {n} has not finished training; cannot expand"
            )));
        }
        if n >= self.sizes.len() {
            return Err(Error::StageOutOfRange {
                stage: n + 1,
                available: self.sizes.len(),
            });
        }
        let mut block = self.blocks[n - 1].clone();
        let mut head = self.heads[n - 1].clone();
        self.set_trainable(false);
        block.set_trainable(true);
        head.set_trainable(true);
        self.blocks.push(block);
        self.heads.push(head);
        self.noise.sigmas.push(1.0);
        Ok(())
    }

    /// True for every stage whose parameters are frozen, in stage order; the
    /// first entry covers the global network.
    pub fn frozen_flags(&self) -> Vec<bool> {
        let all_frozen = |ps: Vec<(String, &Parameter<T>)>| ps.iter().all(|(_, p)| !p.trainable);
        let mut v = vec![all_frozen(self.global.named_params())];
        for (b, h) in self.blocks.iter().zip(&self.heads) {
            let mut ps = b.named_params();
            ps.extend(h.named_params());
            v.push(all_frozen(ps));
        }
        v
    }

    /// Parameters of the stage currently open for training (plus the global
    /// network at stage 1), i.e. every trainable parameter.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut().into_iter().filter(|p| p.trainable).collect()
    }
}

impl<T: Scalar> Module<T> for GeneratorStack<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut v = prefixed("global", self.global.named_params());
        for (i, (b, h)) in self.blocks.iter().zip(&self.heads).enumerate() {
            v.extend(prefixed(&format!("stage{}.block", i + 1), b.named_params()));
            v.extend(prefixed(&format!("stage{}.head", i + 1), h.named_params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.global.params_mut();
        for (b, h) in self.blocks.iter_mut().zip(self.heads.iter_mut()) {
            v.extend(b.params_mut());
            v.extend(h.params_mut());
        }
        v
    }
}
