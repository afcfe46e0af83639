//! Command line front end: builds dense populations of small classifiers,
//! derives sparsified twins, compares the populations, and learns
//! weight-space embeddings — each step a subcommand reading one JSON config
//! and writing into one output directory.
//!
//! Exit codes are a stable contract: 0 success, 2 configuration error,
//! 3 data or file-format error, 4 compute failure (a partially built zoo is
//! kept on disk and flagged in its index). `ZOOTWIN_LOG` sets the log level.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;

use zootwin_core::error::{Error, Result};
use zootwin_core::hyperrep::{run_hyperrep, HyperrepConfig};
use zootwin_core::report::{analyze_zoos, AnalyzeConfig};
use zootwin_core::sparsify::{sparsify_zoo, SparsifyConfig};
use zootwin_core::zoo::{build_zoo, fmt_metric, ZooConfig, ZooSummary};

#[derive(Parser)]
#[command(
    name = "zootwin",
    version,
    about = "Builds zoos of small classifiers, sparsifies them into twin zoos, \
             and analyzes both populations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a population of models over a factor grid into a zoo directory
    TrainZoo(RunArgs),
    /// Sparsify every model of a zoo into twin zoos (magnitude pruning
    /// and/or variational dropout)
    Sparsify(RunArgs),
    /// Compare an original zoo with its twins: agreement, accuracy
    /// correlations, per-layer sparsity reports
    Analyze(RunArgs),
    /// Learn embeddings of a variational twin zoo's weights and probe them
    /// for accuracy, sparsity, epoch, and generalization gap
    Hyperrep(RunArgs),
}

/// The flags every subcommand shares.
#[derive(Args)]
struct RunArgs {
    /// JSON config for this subcommand (see README for each schema)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; must be empty or absent unless --force is given
    #[arg(long)]
    out: PathBuf,
    /// Reseed the run: shifts every grid seed (train-zoo) or replaces the
    /// embedding-training seed (hyperrep); no effect on other subcommands
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-model jobs; defaults to the core count.
    /// Never changes output bytes, only wall time
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Write into a non-empty output directory, overwriting its files
    #[arg(long)]
    force: bool,
}

impl RunArgs {
    fn workers(&self) -> usize {
        self.workers.map(|w| w as usize).unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZOOTWIN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let run = match &cli.cmd {
        Cmd::TrainZoo(a) => cmd_train_zoo(a),
        Cmd::Sparsify(a) => cmd_sparsify(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Hyperrep(a) => cmd_hyperrep(a),
    };
    match run {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("zootwin: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for errors in what the user asked for, 3 for errors in what was on
/// disk, 4 for failures of the computation itself.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Divergence { .. } | Error::Stats(_) | Error::Compute(_) => 4,
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

/// Refuses to touch a non-empty output directory unless forced, so a rerun
/// cannot silently mix two runs' artifacts.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::Config(format!(
                "output path {} exists and is not a directory",
                out.display()
            )));
        }
        if fs::read_dir(out)?.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    Ok(())
}

fn describe_zoo(label: &str, s: &ZooSummary) {
    println!(
        "{label}: {} models ({} ok, {} diverged), mean test accuracy {}",
        s.models,
        s.models - s.diverged,
        s.diverged,
        fmt_metric(s.mean_test_acc)
    );
}

fn cmd_train_zoo(a: &RunArgs) -> Result<u8> {
    let mut cfg: ZooConfig = load_config(&a.config)?;
    if let Some(s) = a.seed {
        for seed in &mut cfg.grid.seeds {
            *seed = seed.wrapping_add(s);
        }
    }
    prepare_out(&a.out, a.force)?;
    info!("training zoo '{}' into {}", cfg.name, a.out.display());
    let summary = build_zoo(&cfg, &a.out, a.workers())?;
    describe_zoo(&cfg.name, &summary);
    println!("zoo written to {}", a.out.display());
    if summary.diverged > 0 {
        eprintln!(
            "zootwin: {} of {} models diverged; partial zoo kept and flagged in index.json",
            summary.diverged, summary.models
        );
        return Ok(4);
    }
    Ok(0)
}

fn cmd_sparsify(a: &RunArgs) -> Result<u8> {
    let cfg: SparsifyConfig = load_config(&a.config)?;
    if a.seed.is_some() {
        warn!("--seed has no effect on sparsify: each trajectory reuses its source model's seed");
    }
    prepare_out(&a.out, a.force)?;
    info!("sparsifying {} into {}", cfg.zoo.display(), a.out.display());
    let summary = sparsify_zoo(&cfg, &a.out, a.workers())?;
    let mut code = 0;
    for (method, dir, s) in &summary.twins {
        describe_zoo(method, s);
        println!("twin written to {}", dir.display());
        if s.diverged > 0 {
            eprintln!(
                "zootwin: {} of {} models diverged in twin {method}; kept and flagged in index.json",
                s.diverged, s.models
            );
            code = 4;
        }
    }
    Ok(code)
}

fn cmd_analyze(a: &RunArgs) -> Result<u8> {
    let cfg: AnalyzeConfig = load_config(&a.config)?;
    if a.seed.is_some() {
        warn!("--seed has no effect on analyze: the reports are deterministic in their inputs");
    }
    prepare_out(&a.out, a.force)?;
    info!("analyzing {} against {} twin(s)", cfg.zoo.display(), cfg.twins.len());
    let summary = analyze_zoos(&cfg, &a.out)?;
    for t in &summary.twins {
        println!(
            "twin {}: mean agreement {}, accuracy correlation r={} tau={}",
            t.tag,
            fmt_metric(t.agreement_mean),
            fmt_metric(t.pearson_r),
            fmt_metric(t.kendall_tau)
        );
    }
    println!("reports written to {}", a.out.display());
    Ok(0)
}

fn cmd_hyperrep(a: &RunArgs) -> Result<u8> {
    let mut cfg: HyperrepConfig = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    prepare_out(&a.out, a.force)?;
    info!("embedding {} into {}", cfg.zoo.display(), a.out.display());
    let summary = run_hyperrep(&cfg, &a.out)?;
    println!(
        "embedded {} checkpoints ({} train / {} held-out models), loss {} -> {}",
        summary.n_samples,
        summary.train_models.len(),
        summary.test_models.len(),
        fmt_metric(summary.first_loss),
        fmt_metric(summary.final_loss)
    );
    for p in &summary.probes {
        println!(
            "probe {}: r2 {} on {} held-out states",
            p.target,
            fmt_metric(p.r2),
            p.n_test
        );
    }
    println!("artifacts written to {}", a.out.display());
    Ok(0)
}
