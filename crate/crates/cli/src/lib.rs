//! `fskws` command-line front end.
//!
//! Every verb reads one [`config::RunConfig`] (TOML file, then `--set`
//! overrides, then dedicated flags) and writes a resolved-config snapshot
//! next to its outputs.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Partition;
use crate::config::{ConfigError, RunConfig, CONFIG_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fskws", version, about = "Few-shot open-set keyword spotting")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for generation, training data and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override any config value, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic keyword corpus with a manifest.
    Generate {
        #[arg(long)]
        n_classes: usize,
        #[arg(long)]
        views: usize,
        /// Defaults to `<output_dir>/corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Apply the configured augmentation to each clip.
        #[arg(long)]
        augment: bool,
    },
    /// Episodic training on the synthetic source.
    Train {
        /// Overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build a keyword profile from support clips in `<supports>/<keyword>/*.wav`.
    Enroll {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        supports: PathBuf,
        /// Keywords to enroll; defaults to every folder under `--supports`.
        #[arg(long, value_delimiter = ',')]
        keywords: Vec<String>,
        /// Defaults to `<output_dir>/profile.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Distance threshold stored in the profile; overrides `detect.d_th`.
        #[arg(long)]
        d_th: Option<f64>,
    },
    /// Classify clips against an enrolled profile.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Overrides the threshold stored in the profile.
        #[arg(long)]
        d_th: Option<f64>,
        /// Also write the result lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Run the few-shot open-set trial protocol.
    Evaluate {
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the freshly initialized encoder instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
        /// Keyword dataset; defaults to `paths.dataset`, then to held-out synthetic classes.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write one embedding per clip of a dataset.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        partition: Partition,
        /// Defaults to `<output_dir>/embeddings.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for an error: configuration problems are distinguished from runtime failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config =
        err.chain().any(|c| c.is::<ConfigError>() || matches!(c.downcast_ref::<fskws_core::Error>(), Some(fskws_core::Error::Config(_))));
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Resolve the configuration with every command-line override applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    match &cli.command {
        Command::Train { steps: Some(n), .. } => cfg.train.total_steps = *n,
        Command::Enroll { d_th: Some(d), .. } => cfg.detect.d_th = *d,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(ConfigError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow::anyhow!("cannot size the worker pool: {e}"))?;
    }
    match cli.command {
        Command::Generate { n_classes, views, out, augment } => {
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("corpus"));
            let g = commands::generate(&cfg, &out, n_classes, views, augment)?;
            println!("wrote {} clips and {}", g.files.len(), g.manifest.display());
        }
        Command::Train { resume, .. } => {
            let t = commands::train(&cfg, resume.as_deref())?;
            println!("final checkpoint {} sha256 {}", t.final_checkpoint.display(), t.final_hash);
        }
        Command::Enroll { checkpoint, supports, keywords, out, .. } => {
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("profile.json"));
            let p = commands::enroll(&cfg, &checkpoint, &supports, &keywords, &out)?;
            println!("enrolled {} keywords into {}", p.prototypes.len(), out.display());
        }
        Command::Detect { checkpoint, profile, d_th, out, wavs } => {
            let lines = commands::detect(&cfg, &checkpoint, &profile, d_th, &wavs)?;
            for l in &lines {
                println!("{l}");
            }
            if let Some(out) = out {
                let mut text = lines.join("\n");
                text.push('\n');
                fskws_core::encoder::write_atomic(&out, text.as_bytes())?;
                let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
                cfg.write_snapshot(dir, "detect")?;
            }
        }
        Command::Evaluate { checkpoint, untrained, dataset } => {
            let e = commands::evaluate(&cfg, checkpoint.as_deref(), untrained, dataset.as_deref())?;
            print!("{}", e.table);
        }
        Command::ExportEmbeddings { checkpoint, dataset, partition, out } => {
            let dataset = dataset
                .or_else(|| cfg.paths.dataset.clone())
                .ok_or_else(|| ConfigError("export-embeddings needs --dataset or paths.dataset".into()))?;
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("embeddings.tsv"));
            let n = commands::export_embeddings(&cfg, &checkpoint, &dataset, partition, &out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
