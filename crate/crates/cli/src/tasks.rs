//! The application tasks behind each subcommand.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcgan::autodiff::{NdArray, Tape};
use tcgan::imageio::{check_rgb, load_image, save_png, write_atomic, Image};
use tcgan::local_net::Source;
use tcgan::metrics::{run_external_metric, ssim};
use tcgan::schedule::{
    build_consingan, build_geometric, build_schedule, emit_schedule_table, resample_image, Resample, ScaleSchedule,
    ScheduleMethod,
};
use tcgan::training::{load_checkpoint, read_header, Precision, TrainConfig, Trainer};
use tcgan::Scalar;

use crate::config::CliConfig;
use crate::error::CliError;
use crate::report::TaskReport;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

/// Down- or up-sampling, whichever reaches `target`.
fn resize_to<T: Scalar>(img: &Image<T>, target: (usize, usize)) -> Result<Image<T>, CliError> {
    let (h, w) = check_rgb(img)?;
    let mode = if target.0 <= h && target.1 <= w {
        Resample::Down
    } else {
        Resample::Up
    };
    Ok(resample_image(img, target, mode)?)
}

fn checkpoint_precision(path: &Path) -> Result<Precision, CliError> {
    Ok(Precision::parse(&read_header(path)?.scalar)?)
}

/// Trains every stage with progress on stderr, then writes the loss CSV and
/// the final reconstruction as `<name>.png`.
fn fit<T: Scalar>(img: &Image<T>, cfg: TrainConfig, out: &Path, name: &str) -> Result<(Trainer<T>, PathBuf), CliError> {
    let mut t = Trainer::new(img, cfg)?.with_output(out)?;
    let n = t.schedule.stages();
    for s in 1..=n {
        let r = t.run_stage(s)?;
        eprintln!(
            "stage {s}/{n} {}x{}: rec {:.5} -> {:.5}",
            r.size.0, r.size.1, r.rec_before, r.rec_after
        );
    }
    write_atomic(out.join("losses.csv"), t.manifest.loss_csv().as_bytes())?;
    let png = out.join(format!("{name}.png"));
    save_png(&t.stack.reconstruct(n)?, &png)?;
    Ok((t, png))
}

fn record_training<T: Scalar>(report: &mut TaskReport, t: &Trainer<T>, out: &Path) {
    for s in &t.manifest.stages {
        if let Some(c) = &s.checkpoint {
            report.output(&out.join(c));
        }
    }
    report.output(&out.join("manifest.json")).output(&out.join("losses.csv"));
    let (h, w) = t.schedule.last();
    report.metric("final_height", h as f64).metric("final_width", w as f64);
}

pub fn train(cfg: &CliConfig, image: Option<&Path>) -> Result<TaskReport, CliError> {
    let image = image
        .or(cfg.image.as_deref())
        .ok_or_else(|| CliError::Usage("no training image: pass IMAGE or set `image` in the config".into()))?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, image),
        Precision::F64 => train_as::<f64>(cfg, image),
    }
}

fn train_as<T: Scalar>(cfg: &CliConfig, image: &Path) -> Result<TaskReport, CliError> {
    let started = Instant::now();
    let img = load_image::<T>(image)?;
    let (t, png) = fit(&img, cfg.train.clone(), &cfg.out, "reconstruction")?;
    let n = t.schedule.stages();
    let quality = ssim(&t.stack.reconstruct(n)?, t.pyramid.level(n)?)?;
    let mut report = TaskReport::new("train");
    report.input("image", image.display()).input("seed", cfg.train.seed);
    record_training(&mut report, &t, &cfg.out);
    report.output(&png).metric("ssim_reconstruction", quality);
    report.timed(started, !cfg.train.deterministic);
    report.write(&cfg.out)?;
    Ok(report)
}

pub fn sample(cfg: &CliConfig, checkpoint: &Path, count: usize, seed: u64) -> Result<TaskReport, CliError> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => sample_as::<f32>(cfg, checkpoint, count, seed),
        Precision::F64 => sample_as::<f64>(cfg, checkpoint, count, seed),
    }
}

/// Smallest fraction of pixels, over all pairs, whose channels differ by more than 0.05.
pub fn min_pair_difference<T: Scalar>(images: &[Image<T>]) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let (a, b) = (&images[i], &images[j]);
            let pixels = a.len() / 3;
            let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
            let (a, b) = (a.as_slice().expect("standard"), b.as_slice().expect("standard"));
            let differ = a
                .chunks(3)
                .zip(b.chunks(3))
                .filter(|(p, q)| p.iter().zip(q.iter()).any(|(u, v)| (u.as_f64() - v.as_f64()).abs() > 0.05))
                .count();
            let f = differ as f64 / pixels as f64;
            worst = Some(worst.map_or(f, |w| w.min(f)));
        }
    }
    worst
}

fn sample_as<T: Scalar>(cfg: &CliConfig, checkpoint: &Path, count: usize, seed: u64) -> Result<TaskReport, CliError> {
    let started = Instant::now();
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let n = ckpt.stack.trained;
    if n == 0 {
        return Err(CliError::Usage(format!("{}: no trained stage", checkpoint.display())));
    }
    create_dir(&cfg.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TaskReport::new("sample");
    report
        .input("checkpoint", checkpoint.display())
        .input("count", count)
        .input("seed", seed)
        .input("stage", n);
    let mut images = Vec::with_capacity(count);
    for k in 0..count {
        let img = ckpt.stack.sample(n, &mut rng)?;
        let path = cfg.out.join(format!("sample_{k:03}.png"));
        save_png(&img, &path)?;
        report.output(&path);
        images.push(img);
    }
    if let Some(d) = min_pair_difference(&images) {
        report.metric("min_pair_difference", d);
    }
    report.timed(started, !ckpt.header.config.deterministic);
    report.write(&cfg.out)?;
    Ok(report)
}

pub fn sr(cfg: &CliConfig, image: Option<&Path>, target: Option<usize>) -> Result<TaskReport, CliError> {
    let image = image
        .or(cfg.image.as_deref())
        .ok_or_else(|| CliError::Usage("no input image: pass IMAGE or set `image` in the config".into()))?;
    let target = target
        .or(cfg.sr_target)
        .ok_or_else(|| CliError::Usage("no target size: pass --target or set `sr_target`".into()))?;
    match cfg.train.precision {
        Precision::F32 => sr_as::<f32>(cfg, image, target),
        Precision::F64 => sr_as::<f64>(cfg, image, target),
    }
}

fn sr_as<T: Scalar>(cfg: &CliConfig, image: &Path, target: usize) -> Result<TaskReport, CliError> {
    let started = Instant::now();
    let img = load_image::<T>(image)?;
    let (h, w) = check_rgb(&img)?;
    if target < h.max(w) {
        return Err(CliError::Usage(format!(
            "target {target} is below the input's long edge {}",
            h.max(w)
        )));
    }
    let train = TrainConfig {
        max_size: Some(target),
        ..cfg.train.clone()
    };
    train.validate()?;
    let (t, png) = fit(&img, train, &cfg.out, "sr")?;
    let n = t.schedule.stages();
    let out = t.stack.reconstruct(n)?;
    let reference = resize_to(&img, t.schedule.last())?;
    let mut report = TaskReport::new("sr");
    report
        .input("image", image.display())
        .input("target", target)
        .input("seed", cfg.train.seed);
    record_training(&mut report, &t, &cfg.out);
    report.output(&png).metric("ssim_vs_input", ssim(&out, &reference)?);
    report.timed(started, !cfg.train.deterministic);
    report.write(&cfg.out)?;
    Ok(report)
}

/// Fixed RGB to `channels` lift: channel `c` carries colour `c mod 3`, scaled
/// by `sqrt(3 / channels)` so each pixel keeps its Euclidean norm when
/// `channels` is a multiple of 3.
pub fn lift_rgb<T: Scalar>(img: &Image<T>, channels: usize) -> Result<NdArray<T>, CliError> {
    let (h, w) = check_rgb(img)?;
    let scale = T::lit((3.0 / channels as f64).sqrt());
    Ok(NdArray::from_shape_fn(IxDyn(&[h, w, channels]), |d| {
        img[[d[0], d[1], d[2] % 3]] * scale
    }))
}

/// `[H, W]` weights in `[0, 1]` from a mask image (channel mean), box-blurred
/// with radius `feather`.
pub fn mask_weights<T: Scalar>(mask: &Image<T>, feather: usize) -> Result<Array2<f64>, CliError> {
    check_rgb(mask)?;
    let m = mask
        .mean_axis(Axis(2))
        .expect("three channels")
        .mapv(|v| (v.as_f64() + 1.0) / 2.0)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d after channel mean");
    let blur = |m: &Array2<f64>, axis: usize| {
        let n = m.shape()[axis] as isize;
        Array2::from_shape_fn(m.raw_dim(), |(y, x)| {
            let r = feather as isize;
            let (mut sum, mut count) = (0.0, 0.0);
            for d in -r..=r {
                let (yy, xx) = if axis == 0 { (y as isize + d, x as isize) } else { (y as isize, x as isize + d) };
                let i = if axis == 0 { yy } else { xx };
                if (0..n).contains(&i) {
                    sum += m[[yy as usize, xx as usize]];
                    count += 1.0;
                }
            }
            sum / count
        })
    };
    Ok(blur(&blur(&m, 0), 1))
}

pub fn harmonize(cfg: &CliConfig, checkpoint: &Path, composite: &Path, stage: usize) -> Result<TaskReport, CliError> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => harmonize_as::<f32>(cfg, checkpoint, composite, stage),
        Precision::F64 => harmonize_as::<f64>(cfg, checkpoint, composite, stage),
    }
}

fn harmonize_as<T: Scalar>(cfg: &CliConfig, checkpoint: &Path, composite: &Path, k: usize) -> Result<TaskReport, CliError> {
    let started = Instant::now();
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let stack = &ckpt.stack;
    let n = stack.trained;
    if k == 0 || k > n {
        return Err(tcgan::Error::StageOutOfRange { stage: k, available: n }.into());
    }
    let comp = load_image::<T>(composite)?;
    let (ch, cw) = check_rgb(&comp)?;
    let (fh, fw) = stack.size(n)?;
    let (a, b) = (ch as f64 / cw as f64, fh as f64 / fw as f64);
    if (a - b).abs() > 0.02 * b {
        return Err(CliError::Usage(format!(
            "composite is {ch}x{cw} but the model's aspect is {fh}x{fw}"
        )));
    }
    let small = resize_to(&comp, stack.size(k)?)?;
    let tape = Tape::no_grad();
    let features = tape.constant(lift_rgb(&small, stack.channels())?);
    let features = stack.run_blocks(&tape, features, k, n, &mut Source::Reconstruction)?;
    let mut out = stack.to_rgb(&tape, features, n)?.value().as_ref().clone();
    let reference = resize_to(&comp, (fh, fw))?;

    let mut report = TaskReport::new("harmonize");
    report
        .input("checkpoint", checkpoint.display())
        .input("composite", composite.display())
        .input("inject_stage", k);
    if let Some(mask_path) = &cfg.mask {
        let mask = resize_to(&load_image::<T>(mask_path)?, (fh, fw))?;
        let m = mask_weights(&mask, cfg.feather)?;
        for ((y, x, c), v) in out.indexed_iter_mut().map(|(d, v)| ((d[0], d[1], d[2]), v)) {
            let wgt = m[[y, x]];
            *v = T::lit(wgt * v.as_f64() + (1.0 - wgt) * reference[[y, x, c]].as_f64());
        }
        report.input("mask", mask_path.display()).input("feather", cfg.feather);
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join("harmonized.png");
    save_png(&out, &path)?;
    report.output(&path).metric("ssim_vs_composite", ssim(&out, &reference)?);
    report.timed(started, !ckpt.header.config.deterministic);
    report.write(&cfg.out)?;
    Ok(report)
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name)
            .extension()
            .map(|x| x.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") && e.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Per-pair SSIM (and the external metric, if configured) as CSV rows
/// `file,ssim[,metric]`, followed by a `mean` row when any pair exists.
pub fn eval(cfg: &CliConfig, dir_a: &Path, dir_b: &Path) -> Result<TaskReport, CliError> {
    let started = Instant::now();
    let (a, b) = (image_names(dir_a)?, image_names(dir_b)?);
    let only_a: Vec<_> = a.difference(&b).cloned().collect();
    let only_b: Vec<_> = b.difference(&a).cloned().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(CliError::Usage(format!(
            "unpaired files: only in {}: {only_a:?}; only in {}: {only_b:?}",
            dir_a.display(),
            dir_b.display()
        )));
    }
    if let Some(bad) = a.iter().find(|n| n.contains([',', '"', '\n'])) {
        return Err(CliError::Usage(format!("file name {bad:?} cannot be written as a CSV field")));
    }
    let metric = cfg.metric_cmd.as_deref();
    let mut csv = String::from("file,ssim");
    if metric.is_some() {
        let _ = write!(csv, ",{}", cfg.metric_name);
    }
    csv.push('\n');
    let mut report = TaskReport::new("eval");
    report.input("dir_a", dir_a.display()).input("dir_b", dir_b.display());
    let (mut ssim_sum, mut ext_sum) = (0.0, 0.0);
    let mut tool_version = None;
    for name in &a {
        let (pa, pb) = (dir_a.join(name), dir_b.join(name));
        let s = ssim(&load_image::<f64>(&pa)?, &load_image::<f64>(&pb)?)?;
        ssim_sum += s;
        let _ = write!(csv, "{name},{s}");
        if let Some(cmd) = metric {
            let r = run_external_metric(&cfg.metric_name, cmd, &pa, &pb)?;
            ext_sum += r.value;
            tool_version = tool_version.or(r.tool_version);
            let _ = write!(csv, ",{}", r.value);
        }
        csv.push('\n');
    }
    if !a.is_empty() {
        let count = a.len() as f64;
        let _ = write!(csv, "mean,{}", ssim_sum / count);
        report.metric("mean_ssim", ssim_sum / count);
        if metric.is_some() {
            let _ = write!(csv, ",{}", ext_sum / count);
            report.metric(&format!("mean_{}", cfg.metric_name), ext_sum / count);
        }
        csv.push('\n');
    }
    if let Some(cmd) = metric {
        report.input("metric_cmd", cmd);
    }
    if let Some(v) = tool_version {
        report.input("metric_tool_version", v);
    }
    report.metric("pairs", a.len() as f64);
    create_dir(&cfg.out)?;
    let path = cfg.out.join("eval.csv");
    write_atomic(&path, csv.as_bytes())?;
    report.output(&path);
    report.timed(started, !cfg.train.deterministic);
    report.write(&cfg.out)?;
    Ok(report)
}

/// Schedules for the requested methods. The comparison rules share the TcGAN
/// endpoint: `singan` shrinks from it by `singan_ratio`, `consingan` spans
/// from `base` to it.
pub fn schedule_table(
    base: usize,
    r: f64,
    stages: usize,
    methods: &[String],
    singan_ratio: f64,
) -> Result<String, CliError> {
    let tcgan = build_schedule((base, base), r, stages)?;
    let last = tcgan.last();
    let mut built: Vec<(&str, ScaleSchedule)> = Vec::new();
    for m in methods {
        let method = ScheduleMethod::parse(m.trim())?;
        let s = match method {
            ScheduleMethod::Tcgan => tcgan.clone(),
            ScheduleMethod::Geometric => build_geometric(last, singan_ratio, stages)?,
            ScheduleMethod::ConSinGan => build_consingan(base, last, stages)?,
        };
        built.push((method.name(), s));
    }
    let refs: Vec<(&str, &ScaleSchedule)> = built.iter().map(|(n, s)| (*n, s)).collect();
    Ok(emit_schedule_table(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn lift_keeps_pixel_norm() {
        let img: Image<f64> = Array3::from_shape_fn((2, 3, 3), |(y, x, c)| (y + x + c) as f64 / 10.0).into_dyn();
        let f = lift_rgb(&img, 24).unwrap();
        assert_eq!(f.shape(), &[2, 3, 24]);
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rgb: Vec<f64> = (0..3).map(|c| img[[1, 2, c]]).collect();
        let feat: Vec<f64> = (0..24).map(|c| f[[1, 2, c]]).collect();
        assert!((norm(&rgb) - norm(&feat)).abs() < 1e-12);
        assert_eq!(f[[0, 1, 4]] / f[[0, 1, 1]], 1.0);
    }

    #[test]
    fn mask_blur_preserves_constants_and_softens_edges() {
        let ones: Image<f64> = NdArray::ones(IxDyn(&[5, 6, 3]));
        let m = mask_weights(&ones, 2).unwrap();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let step: Image<f64> = Array3::from_shape_fn((4, 8, 3), |(_, x, _)| if x < 4 { 1.0 } else { -1.0 }).into_dyn();
        let m = mask_weights(&step, 1).unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        assert!((m[[0, 3]] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_weights(&step, 0).unwrap()[[0, 3]], 1.0);
    }

    #[test]
    fn pair_difference() {
        let a: Image<f64> = NdArray::zeros(IxDyn(&[2, 2, 3]));
        let mut b = a.clone();
        b[[0, 0, 2]] = 0.1;
        assert_eq!(min_pair_difference(&[a.clone(), b]), Some(0.25));
        assert_eq!(min_pair_difference(&[a]), None);
    }

    #[test]
    fn schedule_methods() {
        let csv = schedule_table(25, 0.72, 6, &["tcgan".into()], 0.75).unwrap();
        let sides: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(sides, ["25", "58", "100", "148", "198", "250"]);
        let all = schedule_table(25, 0.72, 6, &["tcgan".into(), "singan".into(), "consingan".into()], 0.75).unwrap();
        assert_eq!(all.lines().count(), 1 + 18);
        assert!(all.lines().filter(|l| l.ends_with(",250,250")).count() == 3);
        let e = schedule_table(25, 0.72, 6, &["progressive".into()], 0.75).unwrap_err().to_string();
        assert!(e.contains("tcgan, singan, consingan"), "{e}");
        assert!(schedule_table(25, 0.72, 2, &["tcgan".into()], 0.75).is_ok());
    }
}
