//! Image-quality measures: SSIM and RMSE in process, anything else through an
//! external command.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::scalar::Scalar;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the luminance the statistics are computed on.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// `[H, W]` luminance in `[0, 1]` of an `[H, W, 3]` image in `[-1, 1]`.
pub fn luminance<T: Scalar>(img: &Image<T>) -> Result<Vec<Vec<f64>>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("luminance", format!("expected [H, W, 3], got {s:?}")));
    }
    Ok((0..s[0])
        .map(|y| {
            (0..s[1])
                .map(|x| {
                    (0..3)
                        .map(|c| LUMA[c] * (img[[y, x, c]].as_f64() + 1.0) / 2.0)
                        .sum()
                })
                .collect()
        })
        .collect())
}

fn blur(img: &[Vec<f64>], taps: &[f64]) -> Vec<Vec<f64>> {
    let h = img.len();
    let w = img[0].len();
    let r = (taps.len() / 2) as isize;
    let rows: Vec<Vec<f64>> = img
        .iter()
        .map(|row| {
            (0..w)
                .map(|x| {
                    taps.iter()
                        .enumerate()
                        .map(|(k, t)| t * row[reflect(x as isize + k as isize - r, w)])
                        .sum()
                })
                .collect()
        })
        .collect();
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    taps.iter()
                        .enumerate()
                        .map(|(k, t)| t * rows[reflect(y as isize + k as isize - r, h)][x])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn check_pair<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "image pair",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Local SSIM at every pixel, with reflected borders.
pub fn ssim_map<T: Scalar>(a: &Image<T>, b: &Image<T>, cfg: &SsimConfig) -> Result<Vec<Vec<f64>>> {
    check_pair(a, b)?;
    let (la, lb) = (luminance(a)?, luminance(b)?);
    if la.is_empty() || la[0].is_empty() {
        return Err(Error::shape("ssim", "empty image"));
    }
    let taps = cfg.taps();
    let prod = |p: &[Vec<f64>], q: &[Vec<f64>]| -> Vec<Vec<f64>> {
        p.iter()
            .zip(q)
            .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).collect())
            .collect()
    };
    let mu_a = blur(&la, &taps);
    let mu_b = blur(&lb, &taps);
    let e_aa = blur(&prod(&la, &la), &taps);
    let e_bb = blur(&prod(&lb, &lb), &taps);
    let e_ab = blur(&prod(&la, &lb), &taps);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    Ok((0..la.len())
        .map(|y| {
            (0..la[0].len())
                .map(|x| {
                    let (ma, mb) = (mu_a[y][x], mu_b[y][x]);
                    let va = e_aa[y][x] - ma * ma;
                    let vb = e_bb[y][x] - mb * mb;
                    let cov = e_ab[y][x] - ma * mb;
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                })
                .collect()
        })
        .collect())
}

pub fn ssim_with<T: Scalar>(a: &Image<T>, b: &Image<T>, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(a, b, cfg)?;
    let n = (map.len() * map[0].len()) as f64;
    Ok(map.iter().flatten().sum::<f64>() / n)
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn rmse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_pair(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetricResult {
    pub metric: String,
    pub value: f64,
    /// The command line as executed.
    pub command: Vec<String>,
    /// First line of `<tool> --version`, when the tool reports one.
    pub tool_version: Option<String>,
}

/// Runs `template` with `{a}` and `{b}` replaced by the two paths and parses
/// its trimmed stdout as one decimal number. The template is split on
/// whitespace; no shell is involved.
pub fn run_external_metric(name: &str, template: &str, a: &Path, b: &Path) -> Result<ExternalMetricResult> {
    let argv: Vec<String> = template
        .split_whitespace()
        .map(|t| {
            t.replace("{a}", &a.to_string_lossy())
                .replace("{b}", &b.to_string_lossy())
        })
        .collect();
    let Some((tool, args)) = argv.split_first() else {
        return Err(Error::Config(format!("empty command template for metric {name}")));
    };
    let out = Command::new(tool).args(args).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ToolNotInstalled(tool.clone())
        } else {
            Error::io(tool, e)
        }
    })?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(Error::ToolOutput {
            tool: tool.clone(),
            output: format!("exit {}: {}{}", out.status, stdout, stderr),
        });
    }
    let value: f64 = stdout.trim().parse().map_err(|_| Error::ToolOutput {
        tool: tool.clone(),
        output: stdout.clone(),
    })?;
    if !value.is_finite() {
        return Err(Error::ToolOutput {
            tool: tool.clone(),
            output: stdout,
        });
    }
    let tool_version = Command::new(tool)
        .arg("--version")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| {
            String::from_utf8_lossy(&o.stdout)
                .lines()
                .next()
                .map(|l| l.trim().to_string())
        })
        .filter(|l| !l.is_empty());
    Ok(ExternalMetricResult {
        metric: name.to_string(),
        value,
        command: argv,
        tool_version,
    })
}
