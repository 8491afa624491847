//! Adversarial objective, stage-wise training loop, run manifest.
//!
//! Each iteration of a stage performs `n_deep` generator updates, each with a
//! fresh latent and fresh noise, then one critic update. Only the open stage's
//! block and head (plus the global network at stage 1) and the critic move.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    file_sha256, load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
    FORMAT_VERSION,
};

use crate::autodiff::{Adam, Parameter, Tape, Var};
use crate::critic::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::global_net::GlobalNetConfig;
use crate::imageio::{load_image, write_atomic, Image};
use crate::local_net::{GeneratorStack, Source};
use crate::metrics::rmse;
use crate::nn::{Bind, Module};
use crate::scalar::Scalar;
use crate::schedule::{
    base_for_image, base_for_max, build_schedule, resample_image, ImagePyramid, Resample, ScaleSchedule,
};

pub const SOFTWARE: &str = concat!("tcgan-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stages: usize,
    pub iters: usize,
    pub n_deep: usize,
    /// Reconstruction weight.
    pub gamma: f64,
    /// Scale-schedule constant.
    pub r: f64,
    /// Shorter side at stage 1, unless `max_size` is set.
    pub min_size: usize,
    /// Longer side at the last stage; overrides `min_size` when set.
    pub max_size: Option<usize>,
    pub latent: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub lambda_gp: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_width: usize,
    pub critic_layers: usize,
    pub critic_norm: bool,
    pub seed: u64,
    pub precision: Precision,
    /// Leaves wall-clock timings out of the manifest so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: 6,
            iters: 1000,
            n_deep: 3,
            gamma: 10.0,
            r: crate::schedule::DEFAULT_R,
            min_size: 25,
            max_size: None,
            latent: 1024,
            tokens: 25,
            channels: 24,
            heads: 6,
            encoder_blocks: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            lambda_gp: 0.1,
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            critic_width: 32,
            critic_layers: 5,
            critic_norm: true,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// The desk-scale configuration: three stages from 16 px, 200 iterations.
    pub fn smoke() -> Self {
        TrainConfig {
            stages: 3,
            iters: 200,
            min_size: 16,
            tokens: 16,
            ..Default::default()
        }
    }

    pub fn global_net(&self) -> GlobalNetConfig {
        GlobalNetConfig {
            latent: self.latent,
            tokens: self.tokens,
            channels: self.channels,
            heads: self.heads,
            blocks: self.encoder_blocks,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            ..Default::default()
        }
    }

    pub fn critic(&self) -> CriticConfig {
        CriticConfig {
            width: self.critic_width,
            layers: self.critic_layers,
            instance_norm: self.critic_norm,
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config(format!("stages must be at least 2, got {}", self.stages)));
        }
        let positive = [
            ("iters", self.iters),
            ("n_deep", self.n_deep),
            ("min_size", self.min_size),
            ("critic_width", self.critic_width),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [("gamma", self.gamma), ("lambda_gp", self.lambda_gp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::Config(format!("r must be positive, got {}", self.r)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {v}")));
            }
        }
        self.global_net().validate()?;
        if self.critic_layers < 2 {
            return Err(Error::Config("critic_layers must be at least 2".into()));
        }
        Ok(())
    }

    /// Stage sizes for an `h x w` training image.
    pub fn schedule_for(&self, h: usize, w: usize) -> Result<ScaleSchedule> {
        let base = match self.max_size {
            Some(max) => {
                let long = base_for_max(max, self.r, self.stages)?;
                let (hi, lo) = (h.max(w) as f64, h.min(w) as f64);
                let short = crate::schedule::round_half_up(long as f64 * lo / hi);
                if h >= w {
                    (long, short)
                } else {
                    (short, long)
                }
            }
            None => base_for_image(h, w, self.min_size),
        };
        build_schedule(base, self.r, self.stages)
    }
}

/// Per-step values of each audited loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    /// `score(fake) - score(real)` for the critic, `-score(fake)` for the generator.
    pub adv: f64,
    pub rec: f64,
    pub gp: f64,
}

/// Mean squared error.
pub fn rec_loss<'t, T: Scalar>(fake: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if fake.shape() != target.shape() {
        return Err(Error::shape(
            "rec_loss",
            format!("{:?} vs {:?}", fake.shape(), target.shape()),
        ));
    }
    Ok(fake.sub(target)?.square().mean())
}

/// `lambda * (|grad score(x_hat)| - 1)^2` with `x_hat = eps * real + (1 - eps) * fake`,
/// differentiable with respect to whatever `score` is parameterized by.
pub fn gradient_penalty_with<'t, T, F>(
    tape: &'t Tape<T>,
    score: F,
    real: &Image<T>,
    fake: &Image<T>,
    eps: T,
    lambda: T,
) -> Result<Var<'t, T>>
where
    T: Scalar,
    F: FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
{
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?} vs {:?}", real.shape(), fake.shape()),
        ));
    }
    let mix = real.mapv(|v| v * eps) + fake.mapv(|v| v * (T::one() - eps));
    let x_hat = tape.leaf(mix, true);
    let d = score(x_hat)?;
    let norm = match tape.grad(d, &[x_hat], true)?[0] {
        Some(g) => g.norm(),
        None => tape.scalar(T::zero()),
    };
    Ok(norm.add_scalar(-T::one()).square().scale(lambda))
}

pub fn gradient_penalty<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: &Critic<T>,
    real: &Image<T>,
    fake: &Image<T>,
    eps: T,
    lambda: T,
) -> Result<Var<'t, T>> {
    gradient_penalty_with(tape, |x| critic.score(tape, x, Bind::Params), real, fake, eps, lambda)
}

/// `score(fake) - score(real) + gp`, minimized over the critic.
pub fn critic_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: &Critic<T>,
    real: &Image<T>,
    fake: &Image<T>,
    eps: T,
    lambda: T,
) -> Result<(Var<'t, T>, LossTerms)> {
    let s_fake = critic.score(tape, tape.constant(fake.clone()), Bind::Params)?;
    let s_real = critic.score(tape, tape.constant(real.clone()), Bind::Params)?;
    let gp = gradient_penalty(tape, critic, real, fake, eps, lambda)?;
    let adv = s_fake.sub(s_real)?;
    let terms = LossTerms {
        adv: adv.item().as_f64(),
        rec: 0.0,
        gp: gp.item().as_f64(),
    };
    Ok((adv.add(gp)?, terms))
}

/// `-score(fake_random) + gamma * rec_loss(fake_rec, target)`; the critic is held fixed.
pub fn generator_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: &Critic<T>,
    fake_random: Var<'t, T>,
    fake_rec: Var<'t, T>,
    target: Var<'t, T>,
    gamma: T,
) -> Result<(Var<'t, T>, LossTerms)> {
    let adv = critic.score(tape, fake_random, Bind::Constants)?.scale(-T::one());
    let rec = rec_loss(fake_rec, target)?;
    let terms = LossTerms {
        adv: adv.item().as_f64(),
        rec: rec.item().as_f64(),
        gp: 0.0,
    };
    Ok((adv.add(rec.scale(gamma))?, terms))
}

/// One parameter update, in the order performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Generator { iteration: usize },
    Critic { iteration: usize },
}

/// Losses of one iteration: the critic update and the last generator update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLosses {
    pub adv_d: f64,
    pub adv_g: f64,
    pub rec: f64,
    pub gp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub size: (usize, usize),
    pub sigma: f64,
    pub generator_steps: usize,
    pub critic_steps: usize,
    /// Reconstruction loss of the fixed latent before the first and after the last update.
    pub rec_before: f64,
    pub rec_after: f64,
    pub losses: Vec<IterLosses>,
    pub duration_secs: Option<f64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    /// Critic parameter digest when the stage opened.
    pub critic_init_digest: String,
    /// Component digests when the stage finished.
    pub digests: BTreeMap<String, String>,
    #[serde(skip)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub config: TrainConfig,
    pub image_size: (usize, usize),
    pub schedule: Vec<(usize, usize)>,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `stage,iteration,adv_d,adv_g,rec,gp` rows for every recorded iteration.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("stage,iteration,adv_d,adv_g,rec,gp\n");
        for s in &self.stages {
            for (i, l) in s.losses.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{:e},{:e},{:e},{:e}\n",
                    s.stage,
                    i + 1,
                    l.adv_d,
                    l.adv_g,
                    l.rec,
                    l.gp
                ));
            }
        }
        out
    }
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn param_digest<T: Scalar>(params: &[(String, &Parameter<T>)]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        h.update([0]);
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for v in p.value.iter() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Digests of the global network, each built stage (block and head), and the critic.
pub fn component_digests<T: Scalar>(stack: &GeneratorStack<T>, critic: &Critic<T>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("global".to_string(), param_digest(&stack.global.named_params()));
    for (i, (b, h)) in stack.blocks.iter().zip(&stack.heads).enumerate() {
        let mut ps = b.named_params();
        ps.extend(h.named_params());
        m.insert(format!("stage{}", i + 1), param_digest(&ps));
    }
    m.insert("critic".to_string(), param_digest(&critic.named_params()));
    m
}

fn stage_rng(seed: u64, stage: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream * 1024 + stage as u64);
    r
}

fn finite(v: f64, what: &'static str, stage: usize, iteration: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { what, stage, iteration })
    }
}

/// Stage output for the open stage; earlier frozen stages run without a graph.
fn forward_open_stage<'t, T: Scalar>(
    tape: &'t Tape<T>,
    stack: &GeneratorStack<T>,
    stage: usize,
    src: &mut Source<'_, T>,
    prefix: Option<&Image<T>>,
    drop_rng: &mut ChaCha8Rng,
) -> Result<Var<'t, T>> {
    let feats = if stage == 1 {
        let grid = stack.global_features_train(tape, src, drop_rng)?;
        stack.run_blocks(tape, grid, 1, 1, src)?
    } else {
        let before = match prefix {
            Some(f) => f.clone(),
            None => {
                let nog = Tape::no_grad();
                let f = stack.features(&nog, stage - 1, src)?;
                f.value().as_ref().clone()
            }
        };
        stack.run_blocks(tape, tape.constant(before), stage, stage, src)?
    };
    stack.to_rgb(tape, feats, stage)
}

fn sample_fake<T: Scalar>(stack: &GeneratorStack<T>, stage: usize, rng: &mut ChaCha8Rng) -> Result<Image<T>> {
    stack.sample(stage, rng)
}

fn rec_error<T: Scalar>(stack: &GeneratorStack<T>, stage: usize, target: &Image<T>) -> Result<f64> {
    let r = stack.reconstruct(stage)?;
    Ok(rmse(&r, target)?.powi(2))
}

/// Trains the open stage (the last built one) against `target`.
///
/// On a non-finite loss nothing is updated; if `dump` is given the current
/// (last good) state is written there before the error is returned.
pub fn train_stage<T: Scalar>(
    stack: &mut GeneratorStack<T>,
    critic: &mut Critic<T>,
    target: &Image<T>,
    cfg: &TrainConfig,
    dump: Option<&Path>,
) -> Result<StageRecord> {
    let stage = stack.stages();
    let size = stack.size(stage)?;
    if target.shape() != [size.0, size.1, 3] {
        return Err(Error::shape(
            "train_stage",
            format!("target {:?} for stage size {size:?}", target.shape()),
        ));
    }
    let started = Instant::now();
    let mut rng = stage_rng(cfg.seed, stage, 1);
    let mut drop_rng = stage_rng(cfg.seed, stage, 2);
    let adam = cfg.adam();
    let gamma = T::lit(cfg.gamma);
    let lambda = T::lit(cfg.lambda_gp);

    let rec_prefix = if stage > 1 {
        let nog = Tape::no_grad();
        let f = stack.features(&nog, stage - 1, &mut Source::Reconstruction)?;
        Some(f.value().as_ref().clone())
    } else {
        None
    };

    let mut record = StageRecord {
        stage,
        size,
        sigma: stack.noise.sigmas[stage - 1],
        generator_steps: 0,
        critic_steps: 0,
        rec_before: rec_error(stack, stage, target)?,
        rec_after: f64::NAN,
        losses: Vec::with_capacity(cfg.iters),
        duration_secs: None,
        checkpoint: None,
        checkpoint_sha256: None,
        critic_init_digest: param_digest(&critic.named_params()),
        digests: BTreeMap::new(),
        steps: Vec::with_capacity(cfg.iters * (cfg.n_deep + 1)),
    };

    let fail = |e: Error, stack: &GeneratorStack<T>, critic: &Critic<T>| -> Error {
        if let Some(p) = dump {
            if let Err(w) = save_checkpoint(stack, critic, cfg, p) {
                return Error::Config(format!("{e}; writing last good checkpoint failed: {w}"));
            }
        }
        e
    };

    for it in 1..=cfg.iters {
        let mut g_terms = LossTerms::default();
        for _ in 0..cfg.n_deep {
            let tape = Tape::new();
            let mut src = Source::random(stack.latent(), &mut rng);
            let fake = forward_open_stage(&tape, stack, stage, &mut src, None, &mut drop_rng)?;
            let mut rec_src = Source::Reconstruction;
            let fake_rec = forward_open_stage(&tape, stack, stage, &mut rec_src, rec_prefix.as_ref(), &mut drop_rng)?;
            let x = tape.constant(target.clone());
            let (loss, terms) = generator_loss(&tape, critic, fake, fake_rec, x, gamma)?;
            if let Err(e) = finite(loss.item().as_f64(), "generator loss", stage, it) {
                return Err(fail(e, stack, critic));
            }
            let grads = tape.backward(loss)?;
            let mut params = stack.trainable_params_mut();
            for p in params.iter_mut() {
                p.zero_grad();
                grads.accumulate_into(p);
            }
            adam.step(params);
            record.generator_steps += 1;
            record.steps.push(Step::Generator { iteration: it });
            g_terms = terms;
        }

        let fake = sample_fake(stack, stage, &mut rng)?;
        let eps = T::lit(rng.random::<f64>());
        let tape = Tape::new();
        let (loss, d_terms) = critic_loss(&tape, critic, target, &fake, eps, lambda)?;
        if let Err(e) = finite(loss.item().as_f64(), "critic loss", stage, it) {
            return Err(fail(e, stack, critic));
        }
        let grads = tape.backward(loss)?;
        let mut params = critic.params_mut();
        for p in params.iter_mut() {
            p.zero_grad();
            grads.accumulate_into(p);
        }
        adam.step(params);
        record.critic_steps += 1;
        record.steps.push(Step::Critic { iteration: it });
        record.losses.push(IterLosses {
            adv_d: d_terms.adv,
            adv_g: g_terms.adv,
            rec: g_terms.rec,
            gp: d_terms.gp,
        });
    }

    record.rec_after = rec_error(stack, stage, target)?;
    if !cfg.deterministic {
        record.duration_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok(record)
}

/// Noise amplitude for `stage >= 2`: RMSE between the upsampled previous
/// reconstruction and the stage's training image.
pub fn stage_sigma<T: Scalar>(stack: &GeneratorStack<T>, stage: usize, target: &Image<T>) -> Result<f64> {
    let prev = stack.reconstruct(stage - 1)?;
    let up = resample_image(&prev, (target.shape()[0], target.shape()[1]), Resample::Up)?;
    rmse(&up, target)
}

/// A full training run over one image.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub schedule: ScaleSchedule,
    pub pyramid: ImagePyramid<T>,
    pub stack: GeneratorStack<T>,
    pub critic: Critic<T>,
    pub manifest: RunManifest,
    out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(image: &Image<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = crate::imageio::check_rgb(image)?;
        let schedule = cfg.schedule_for(h, w)?;
        let pyramid = ImagePyramid::build(image, &schedule)?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let stack = GeneratorStack::new(cfg.global_net(), schedule.sizes.clone(), &mut init)?;
        let critic = Critic::new(cfg.critic(), &mut init)?;
        let manifest = RunManifest {
            software: SOFTWARE.to_string(),
            config: cfg.clone(),
            image_size: (h, w),
            schedule: schedule.sizes.clone(),
            seed: cfg.seed,
            sigmas: Vec::new(),
            stages: Vec::new(),
        };
        Ok(Trainer {
            cfg,
            schedule,
            pyramid,
            stack,
            critic,
            manifest,
            out_dir: None,
        })
    }

    /// Checkpoints go to `dir/stage{i}.ckpt` and the manifest to `dir/manifest.json`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn checkpoint_path(&self, stage: usize) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(format!("stage{stage}.ckpt")))
    }

    /// Opens (for `stage >= 2`) and trains one stage; stages must run in order.
    pub fn run_stage(&mut self, stage: usize) -> Result<&StageRecord> {
        if stage != self.stack.trained + 1 || stage > self.schedule.stages() {
            return Err(Error::StageOutOfRange {
                stage,
                available: self.schedule.stages(),
            });
        }
        let target = self.pyramid.level(stage)?.clone();
        if stage > 1 {
            let sigma = stage_sigma(&self.stack, stage, &target)?;
            self.stack.expand_stage()?;
            self.stack.noise.sigmas[stage - 1] = sigma;
            self.critic = self.critic.warm_start();
        }
        let dump = self.out_dir.as_ref().map(|d| d.join("last_good.ckpt"));
        let mut record = train_stage(&mut self.stack, &mut self.critic, &target, &self.cfg, dump.as_deref())?;
        self.stack.trained = stage;
        record.digests = component_digests(&self.stack, &self.critic);
        if let Some(path) = self.checkpoint_path(stage) {
            let digest = save_checkpoint(&self.stack, &self.critic, &self.cfg, &path)?;
            record.checkpoint = path.file_name().map(|n| n.to_string_lossy().into_owned());
            record.checkpoint_sha256 = Some(digest);
        }
        self.manifest.sigmas = self.stack.noise.sigmas.clone();
        self.manifest.stages.push(record);
        if let Some(dir) = &self.out_dir {
            write_atomic(dir.join("manifest.json"), self.manifest.to_json()?.as_bytes())?;
        }
        Ok(self.manifest.stages.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<&RunManifest> {
        for stage in self.stack.trained + 1..=self.schedule.stages() {
            self.run_stage(stage)?;
        }
        Ok(&self.manifest)
    }
}

/// Loads `image_path`, trains every stage at the configured precision and
/// returns the manifest. Artifacts go to `out_dir` when given.
pub fn train_all(image_path: &Path, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunManifest> {
    fn go<T: Scalar>(image_path: &Path, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunManifest> {
        let img = load_image::<T>(image_path)?;
        let mut t = Trainer::new(&img, cfg.clone())?;
        if let Some(d) = out_dir {
            t = t.with_output(d)?;
        }
        Ok(t.run()?.clone())
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(image_path, cfg, out_dir),
        Precision::F64 => go::<f64>(image_path, cfg, out_dir),
    }
}
