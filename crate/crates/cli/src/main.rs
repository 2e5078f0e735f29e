//! Command-line entry point for the dual-group policy optimization lab.
//!
//! Subcommands: `run` executes a training experiment from a config file,
//! `variants` emits variant frame-index sets, `score` prints per-frame
//! relevance scores for an embedding file, and `check` runs the built-in
//! invariant suite. Data goes to stdout, diagnostics to stderr, and every
//! command is deterministic given `--seed` (or the `DGPO_SEED` env var).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dgpo::check::{run_checks, Mutation};
use dgpo::config::load_run_config;
use dgpo::harness::{run_training, write_metrics_csv, VariantMode};
use dgpo::rng;
use dgpo::scoring::{read_embedding_file, score_frames};
use dgpo::variants::{
    deterministic_variant_indices, importance_variant_indices, stochastic_variant_spec,
};

#[derive(Parser)]
#[command(name = "dgpo", version, about = "Dual-group policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
    Importance,
}

impl From<ModeArg> for VariantMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Deterministic => VariantMode::Deterministic,
            ModeArg::Stochastic => VariantMode::Stochastic,
            ModeArg::Importance => VariantMode::Importance,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MutationArg {
    /// Self-test fixture: corrupt the joint-advantage path so the
    /// flattening-equivalence check must fail.
    JointAdvantageScale,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment and write the metrics CSV.
    Run {
        /// TOML config file; all fields required, unknown keys rejected.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's metrics output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print variant frame-index sets, one space-separated line per variant.
    Variants {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Total frames F (deterministic / stochastic modes).
        #[arg(long)]
        frames: Option<usize>,
        /// Frame budget per variant.
        #[arg(long, default_value_t = 16)]
        budget: usize,
        /// Number of variants M.
        #[arg(long = "variants", default_value_t = 2)]
        num_variants: usize,
        /// Softmax temperature (importance mode).
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// FEMB embedding file (importance mode); F comes from the file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Print per-frame relevance scores for an embedding file.
    Score {
        /// FEMB embedding file.
        embeddings: PathBuf,
    },
    /// Run the invariant self-check suite; exit 0 iff every check passes.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        /// Deliberately corrupt one implementation path to verify the suite
        /// catches it.
        #[arg(long, value_enum)]
        mutate: Option<MutationArg>,
    },
}

/// Seed resolution: flag beats `DGPO_SEED` beats 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("DGPO_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| anyhow!("DGPO_SEED must be an unsigned integer, got {text:?}")),
        Err(_) => Ok(0),
    }
}

fn cmd_run(config_path: &Path, seed: Option<u64>, output: Option<PathBuf>) -> Result<()> {
    let mut config = load_run_config(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(output) = output {
        config.metrics_path = output;
    }
    let out = run_training(&config)?;
    write_metrics_csv(&config.metrics_path, &out.rows)?;
    let last = out.rows.last().expect("steps >= 1");
    eprintln!(
        "wrote {} rows to {} (rollouts/step {}, final reward_mean {:.4}, eval_accuracy {:.4})",
        out.rows.len(),
        config.metrics_path.display(),
        out.rollouts_per_step,
        last.reward_mean,
        last.eval_accuracy
    );
    Ok(())
}

fn print_variant_lines(variants: &[dgpo::VariantSpec]) {
    for v in variants {
        let line: Vec<String> = v.frame_indices.iter().map(usize::to_string).collect();
        println!("{}", line.join(" "));
    }
}

fn cmd_variants(
    mode: ModeArg,
    frames: Option<usize>,
    budget: usize,
    num_variants: usize,
    tau: f64,
    seed: u64,
    embeddings: Option<PathBuf>,
) -> Result<()> {
    match VariantMode::from(mode) {
        VariantMode::Deterministic => {
            let f = frames.ok_or_else(|| anyhow!("--frames is required in deterministic mode"))?;
            let variants = (0..num_variants)
                .map(|i| deterministic_variant_indices(f, budget, num_variants, i))
                .collect::<dgpo::Result<Vec<_>>>()?;
            print_variant_lines(&variants);
        }
        VariantMode::Stochastic => {
            let f = frames.ok_or_else(|| anyhow!("--frames is required in stochastic mode"))?;
            let variants = (0..num_variants)
                .map(|i| {
                    let mut rng = rng::substream(seed, &[rng::VARIANT, i as u64]);
                    stochastic_variant_spec(f, budget, i, &mut rng)
                })
                .collect::<dgpo::Result<Vec<_>>>()?;
            print_variant_lines(&variants);
        }
        VariantMode::Importance => {
            let path = embeddings
                .ok_or_else(|| anyhow!("--embeddings is required in importance mode"))?;
            let (frame_emb, query) = read_embedding_file(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let scores = score_frames(&frame_emb, &query)?;
            if scores.len() < budget {
                eprintln!(
                    "warning: {} frames < budget {budget}; segment count clamped to {}",
                    scores.len(),
                    scores.len()
                );
            }
            let stream_seed = rng::derive(seed, &[rng::VARIANT]);
            let variants =
                importance_variant_indices(scores.as_slice(), budget, tau, num_variants, stream_seed)?;
            print_variant_lines(&variants);
        }
    }
    Ok(())
}

fn cmd_score(path: &Path) -> Result<()> {
    let (frames, query) =
        read_embedding_file(path).with_context(|| format!("reading {}", path.display()))?;
    let scores = score_frames(&frames, &query)?;
    for s in scores.as_slice() {
        println!("{s:.6}");
    }
    Ok(())
}

fn cmd_check(seed: u64, mutate: Option<MutationArg>) -> Result<()> {
    let mutation = mutate.map(|m| match m {
        MutationArg::JointAdvantageScale => Mutation::JointAdvantageScale,
    });
    let reports = run_checks(seed, mutation);
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", reports.len());
    }
    eprintln!("all {} checks passed", reports.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
        } => cmd_run(&config, seed, output),
        Command::Variants {
            mode,
            frames,
            budget,
            num_variants,
            tau,
            seed,
            embeddings,
        } => cmd_variants(
            mode,
            frames,
            budget,
            num_variants,
            tau,
            resolve_seed(seed)?,
            embeddings,
        ),
        Command::Score { embeddings } => cmd_score(&embeddings),
        Command::Check { seed, mutate } => cmd_check(resolve_seed(seed)?, mutate),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
