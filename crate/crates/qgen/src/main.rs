use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use qgen::commands;
use qgen_core::train::Preset;

/// Answer-aware question generation.
#[derive(Parser)]
#[command(name = "qgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, sidecar files, and the training log.
    Train {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Override the structural flags with one of the ablation presets.
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
    },
    /// Write one question per input triple, in input order.
    Generate {
        /// Model directory or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// JSON-lines triples.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score generated questions against references.
    Evaluate {
        /// Hypothesis files, one tokenized question per line.
        #[arg(long, required = true, num_args = 1..)]
        hyps: Vec<PathBuf>,
        #[arg(long)]
        refs: PathBuf,
        /// Model for perplexity of the reference questions of `--data`.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        /// Render a text table instead of JSON.
        #[arg(long)]
        table: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Average checkpoints coordinate-wise.
    Average {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train and score the four ablation configurations.
    Ablate {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Grid search over the language-model loss weight.
    BetaSweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        values: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, preset } => {
            let s = commands::cmd_train(&config, &out, preset)?;
            match s.best_step {
                Some(step) => {
                    println!("trained: final E {:.4}, best dev step {step}, model in {}", s.final_e, out.display())
                }
                None => println!("trained: final E {:.4}, model in {}", s.final_e, out.display()),
            }
            if let Some(c) = s.embedding_coverage {
                println!("pretrained vectors cover {c} words");
            }
        }
        Command::Generate { model, data, out, beam, max_len } => {
            let q = commands::cmd_generate(&model, &data, &out, beam, max_len)?;
            println!("wrote {} questions to {}", q.len(), out.display());
        }
        Command::Evaluate { hyps, refs, model, data, table, out } => {
            let pair = model.as_deref().zip(data.as_deref());
            let text = commands::cmd_evaluate(&hyps, &refs, pair, table, out.as_deref())?;
            print!("{text}");
        }
        Command::Average { checkpoints, out } => {
            commands::cmd_average(&checkpoints, &out)?;
            println!("averaged {} checkpoints into {}", checkpoints.len(), out.display());
        }
        Command::Ablate { config, out } => print!("{}", commands::cmd_ablate(&config, &out)?.table()),
        Command::BetaSweep { config, values, out } => {
            print!("{}", commands::cmd_beta_sweep(&config, &values, &out)?.text())
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
