//! Stage resolutions and the training-image pyramid.
//!
//! Stage `i` (1-based) has size `round(base * (1 + r*(i+1)*ln(i) / (1 + e^-i)))`,
//! applied to height and width independently with round-half-up. The
//! geometric (SinGAN-style) and log-spaced (ConSinGAN-style) rules are kept for
//! comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{resize_hw, Interp, NdArray};
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::scalar::Scalar;

pub const DEFAULT_R: f64 = 0.72;

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Multiplier applied to the base size at stage `i >= 1`.
pub fn scale_factor(i: usize, r: f64) -> Result<f64> {
    if i < 1 {
        return Err(Error::Domain(format!("stage index must be >= 1, got {i}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("scale scalar r must be positive, got {r}")));
    }
    let i = i as f64;
    Ok(1.0 + r * (i + 1.0) * i.ln() / (1.0 + (-i).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleMethod {
    /// Logarithmic-growth rule anchored at the base (smallest) size.
    Tcgan,
    /// `max * r^(N - i)`, anchored at the largest size.
    Geometric,
    /// Log-spaced exponents between the smallest and largest size.
    ConSinGan,
}

impl ScheduleMethod {
    pub const NAMES: [&'static str; 3] = ["tcgan", "singan", "consingan"];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tcgan" => Ok(ScheduleMethod::Tcgan),
            "singan" | "geometric" => Ok(ScheduleMethod::Geometric),
            "consingan" => Ok(ScheduleMethod::ConSinGan),
            other => Err(Error::Config(format!(
                "unknown schedule method `{other}` (valid: {})",
                ScheduleMethod::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleMethod::Tcgan => "tcgan",
            ScheduleMethod::Geometric => "singan",
            ScheduleMethod::ConSinGan => "consingan",
        }
    }
}

/// Per-stage `(height, width)` sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub method: ScheduleMethod,
    pub base: (usize, usize),
    pub r: f64,
    pub sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn stages(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, stage: usize) -> Result<(usize, usize)> {
        stage
            .checked_sub(1)
            .and_then(|i| self.sizes.get(i))
            .copied()
            .ok_or(Error::StageOutOfRange {
                stage,
                available: self.sizes.len(),
            })
    }

    pub fn last(&self) -> (usize, usize) {
        *self.sizes.last().expect("schedules have at least two stages")
    }

    fn check_increasing(self) -> Result<Self> {
        for (k, w) in self.sizes.windows(2).enumerate() {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::DegenerateSchedule {
                    a: k + 1,
                    b: k + 2,
                    size: w[1],
                });
            }
        }
        Ok(self)
    }
}

fn check_args(base: (usize, usize), stages: usize) -> Result<()> {
    if base.0 < 4 || base.1 < 4 {
        return Err(Error::Domain(format!(
            "base size must be at least 4x4, got {}x{}",
            base.0, base.1
        )));
    }
    if stages < 2 {
        return Err(Error::Domain(format!("need at least 2 stages, got {stages}")));
    }
    Ok(())
}

pub fn build_schedule(base: (usize, usize), r: f64, stages: usize) -> Result<ScaleSchedule> {
    check_args(base, stages)?;
    let sizes = (1..=stages)
        .map(|i| {
            let f = scale_factor(i, r)?;
            Ok((
                round_half_up(base.0 as f64 * f),
                round_half_up(base.1 as f64 * f),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ScaleSchedule {
        method: ScheduleMethod::Tcgan,
        base,
        r,
        sizes,
    }
    .check_increasing()
}

/// Geometric schedule ending exactly at `max`.
pub fn build_geometric(max: (usize, usize), r: f64, stages: usize) -> Result<ScaleSchedule> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("geometric ratio must be in (0, 1), got {r}")));
    }
    if stages < 2 {
        return Err(Error::Domain(format!("need at least 2 stages, got {stages}")));
    }
    let sizes: Vec<_> = (1..=stages)
        .map(|i| {
            let f = r.powi((stages - i) as i32);
            (
                round_half_up(max.0 as f64 * f),
                round_half_up(max.1 as f64 * f),
            )
        })
        .collect();
    ScaleSchedule {
        method: ScheduleMethod::Geometric,
        base: sizes[0],
        r,
        sizes,
    }
    .check_increasing()
}

/// Log-spaced schedule from `min` (shorter side) to `max`, denser at low resolution.
pub fn build_consingan(min: usize, max: (usize, usize), stages: usize) -> Result<ScaleSchedule> {
    if stages < 2 {
        return Err(Error::Domain(format!("need at least 2 stages, got {stages}")));
    }
    let short = max.0.min(max.1) as f64;
    let steps = (stages - 1) as f64;
    let factor = (min as f64 / short).powf(1.0 / steps);
    let sizes: Vec<_> = (0..stages)
        .map(|i| {
            let f = if i == stages - 1 {
                1.0
            } else if stages == 2 {
                factor
            } else {
                let expo = ((steps - 1.0) / steps.ln()) * (steps - i as f64).ln() + 1.0;
                factor.powf(expo)
            };
            (
                round_half_up(max.0 as f64 * f),
                round_half_up(max.1 as f64 * f),
            )
        })
        .collect();
    ScaleSchedule {
        method: ScheduleMethod::ConSinGan,
        base: sizes[0],
        r: factor,
        sizes,
    }
    .check_increasing()
}

/// Base size for a schedule whose final stage has `max` pixels on the long edge.
pub fn base_for_max(max: usize, r: f64, stages: usize) -> Result<usize> {
    Ok(round_half_up(max as f64 / scale_factor(stages, r)?))
}

/// Base size for an image of `(h, w)`: the shorter side becomes `min`.
pub fn base_for_image(h: usize, w: usize, min: usize) -> (usize, usize) {
    if h <= w {
        (min, round_half_up(min as f64 * w as f64 / h as f64))
    } else {
        (round_half_up(min as f64 * h as f64 / w as f64), min)
    }
}

/// CSV with columns `method,stage,height,width`.
pub fn emit_schedule_table(schedules: &[(&str, &ScaleSchedule)]) -> Result<String> {
    if schedules.is_empty() {
        return Err(Error::Config("no schedules to emit".into()));
    }
    let mut out = String::from("method,stage,height,width\n");
    for (name, s) in schedules {
        if name.trim().is_empty() {
            return Err(Error::Config("schedule name must not be empty".into()));
        }
        if name.contains([',', '\n', '"']) {
            return Err(Error::Config(format!("schedule name {name:?} is not a CSV field")));
        }
        for (i, (h, w)) in s.sizes.iter().enumerate() {
            writeln!(out, "{name},{},{h},{w}", i + 1).expect("write to String");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Bicubic (Catmull-Rom) with area-scaled support, used on the training image.
    Down,
    /// Bilinear, as used between generator stages.
    Up,
}

/// Resizes a `[H, W, 3]` image in `[-1, 1]`; the result is clamped to that range.
pub fn resample_image<T: Scalar>(img: &Image<T>, target: (usize, usize), mode: Resample) -> Result<Image<T>> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Domain(format!("target size {target:?} must be positive")));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if (h, w) == target {
        return Ok(img.clone());
    }
    let out = match mode {
        Resample::Up => resize_hw(img, target.0, target.1, Interp::Bilinear)?,
        Resample::Down => imageio::bicubic_resize(img, target)?,
    };
    let (lo, hi) = (-T::one(), T::one());
    Ok(out.mapv(|v| v.max(lo).min(hi)))
}

/// The training image at every stage resolution.
#[derive(Debug, Clone)]
pub struct ImagePyramid<T: Scalar> {
    pub levels: Vec<Image<T>>,
}

impl<T: Scalar> ImagePyramid<T> {
    /// Each level is resampled directly from the full image.
    pub fn build(img: &Image<T>, schedule: &ScaleSchedule) -> Result<Self> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let levels = schedule
            .sizes
            .iter()
            .map(|&s| {
                let mode = if s.0 <= h && s.1 <= w {
                    Resample::Down
                } else {
                    Resample::Up
                };
                resample_image(img, s, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImagePyramid { levels })
    }

    pub fn level(&self, stage: usize) -> Result<&NdArray<T>> {
        stage
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or(Error::StageOutOfRange {
                stage,
                available: self.levels.len(),
            })
    }
}
