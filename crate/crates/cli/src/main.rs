use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use panther_cli::commands::{self, GRAD_CHECK_TOLERANCE};
use panther_cli::config::RunConfig;
use panther_core::data::GridSpec;

#[derive(Parser)]
#[command(name = "panther", version, about = "Toy instruction-aware multimodal pipeline experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-turn dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Turns per conversation: `K` or `MIN-MAX`
        #[arg(long, default_value = "3")]
        k: String,
        #[arg(long, default_value_t = 0, env = "PANTHER_SEED")]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        /// Side of one colored block in pixels
        #[arg(long, default_value_t = 4)]
        block: usize,
    },
    /// Train from scratch and write a checkpoint directory
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's decoder mode
        #[arg(long)]
        mode: Option<String>,
    },
    /// Sweep pruning thresholds and report retained tokens and epoch time
    PruneBench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.97,0.95,0.90")]
        taus: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full pipeline on a micro model
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump one encoder layer's CLS-to-patch attention map
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: usize,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy of greedy answers
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must stay off: inference never prunes
        #[arg(long, default_value = "off")]
        bridge: String,
        /// Write generated answers, one per line
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Prune per-turn token dumps and write index lists plus a report
    Prune {
        #[arg(long, required = true, num_args = 1..)]
        turns: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        tau: f64,
        /// Text tokens to include in the length report
        #[arg(long, default_value_t = 0)]
        text_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, fallback: RunConfig) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => fallback,
    };
    Ok(cfg.with_env()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            n,
            k,
            seed,
            height,
            width,
            patch,
            block,
        } => {
            let grid = GridSpec {
                height,
                width,
                patch,
                block,
            };
            let turns = commands::parse_turn_range(&k).with_context(|| format!("--k {k:?}"))?;
            let count = commands::gen_data(&out, n, turns, &grid, seed)?;
            println!("wrote {count} conversations to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            mode,
        } => {
            let mut cfg = load_config(config.as_ref(), RunConfig::default())?;
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            let s = commands::train(&cfg, &data, &out)?;
            println!(
                "trained {} steps in {:.1}s, final loss {:.6}; checkpoint in {}",
                s.steps,
                s.seconds,
                s.final_loss,
                out.display()
            );
            for a in &s.audit {
                println!(
                    "{:<16} {:>8} scalars {:>8} changed (max |change| {:.3e})",
                    a.group.as_str(),
                    a.scalars,
                    a.changed,
                    a.max_abs_change
                );
            }
        }
        Command::PruneBench {
            data,
            checkpoint,
            taus,
            out,
        } => {
            let rows = commands::prune_bench(&data, &checkpoint, &taus, out.as_deref())?;
            println!("{}", commands::BenchRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
        Command::GradCheck { config } => {
            let cfg = load_config(config.as_ref(), RunConfig::micro())?;
            let r = commands::grad_check(&cfg)?;
            println!(
                "checked {} scalars, worst relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
                r.checked, r.max_rel_err, r.analytic, r.numeric
            );
            if r.max_rel_err >= GRAD_CHECK_TOLERANCE {
                eprintln!("gradient check failed: {:.3e} >= {GRAD_CHECK_TOLERANCE:e}", r.max_rel_err);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpAttn {
            checkpoint,
            data,
            image_id,
            instruction,
            layer,
            out,
        } => {
            let map = commands::dump_attn(&checkpoint, &data, image_id, instruction.as_deref(), layer, &out)?;
            println!(
                "wrote {}x{} attention map to {}",
                map.rows(),
                map.cols(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            bridge,
            predictions,
        } => {
            let on = match bridge.as_str() {
                "on" => true,
                "off" => false,
                other => anyhow::bail!("--bridge must be on|off, got {other:?}"),
            };
            let r = commands::eval(&checkpoint, &data, on, predictions.as_deref())?;
            println!("exact match {}/{} = {:.4}", r.correct, r.total, r.accuracy());
        }
        Command::Prune {
            turns,
            tau,
            text_tokens,
            out,
        } => {
            let r = commands::prune_files(&turns, tau, text_tokens, &out)?;
            println!("{}", panther_core::bridge::PruneReport::CSV_HEADER);
            println!("{}", r.csv_row());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
