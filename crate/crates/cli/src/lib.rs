//! Command-line front end: `tcgan train|sample|sr|harmonize|eval|schedule`.
//!
//! Exit codes: 0 on success, 1 when training or computation fails, 2 for
//! usage, configuration and I/O errors.

pub mod config;
pub mod error;
pub mod report;
pub mod tasks;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::CliConfig;
pub use error::CliError;
pub use report::TaskReport;

#[derive(Debug, Parser)]
#[command(name = "tcgan", version, about = "Single-image generation with a transformer-conditioned GAN pyramid")]
pub struct Cli {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every stage on one image.
    Train { image: Option<PathBuf> },
    /// Write random samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a pyramid whose last stage reaches `--target` and emit its reconstruction.
    Sr {
        image: Option<PathBuf>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Inject a composite at one stage and re-render it through the later stages.
    Harmonize {
        composite: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stage: Option<usize>,
        /// Blend the result back into the composite through this mask.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// SSIM between same-named images of two directories.
    Eval { dir_a: PathBuf, dir_b: PathBuf },
    /// Print or write stage-size tables.
    Schedule {
        #[arg(long, default_value_t = 25)]
        base: usize,
        #[arg(long, default_value_t = tcgan::schedule::DEFAULT_R)]
        r: f64,
        #[arg(long, default_value_t = 6)]
        stages: usize,
        /// Comma-separated: tcgan, singan, consingan.
        #[arg(long, value_delimiter = ',', default_value = "tcgan")]
        methods: Vec<String>,
        /// Per-stage ratio of the geometric rule.
        #[arg(long, default_value_t = 0.75)]
        singan_ratio: f64,
    },
    /// Print the effective configuration with every key documented.
    Config,
}

fn effective_config(cli: &Cli) -> Result<CliConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn need(value: Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{key} (or `{key}` in the config)")))
}

/// Runs one parsed command. Returns the text to print on stdout.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let cfg = effective_config(&cli)?;
    let report = match cli.command {
        Command::Train { image } => tasks::train(&cfg, image.as_deref())?,
        Command::Sample { checkpoint, count } => {
            let ckpt = need(checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
            tasks::sample(&cfg, &ckpt, count.unwrap_or(cfg.samples), cfg.train.seed)?
        }
        Command::Sr { image, target } => tasks::sr(&cfg, image.as_deref(), target)?,
        Command::Harmonize {
            composite,
            checkpoint,
            stage,
            mask,
        } => {
            let ckpt = need(checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
            let cfg = CliConfig {
                mask: mask.or(cfg.mask.clone()),
                ..cfg.clone()
            };
            tasks::harmonize(&cfg, &ckpt, &composite, stage.unwrap_or(cfg.inject_stage))?
        }
        Command::Eval { dir_a, dir_b } => tasks::eval(&cfg, &dir_a, &dir_b)?,
        Command::Schedule {
            base,
            r,
            stages,
            methods,
            singan_ratio,
        } => {
            let table = tasks::schedule_table(base, r, stages, &methods, singan_ratio)?;
            return match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
                    let path = dir.join("schedule.csv");
                    tcgan::imageio::write_atomic(&path, table.as_bytes())?;
                    Ok(format!("wrote {}\n", path.display()))
                }
                None => Ok(table),
            };
        }
        Command::Config => return Ok(cfg.emit()),
    };
    let mut text = String::new();
    for (k, v) in &report.metrics {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("report: {}\n", report.path_in(&cfg.out).display()));
    Ok(text)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
