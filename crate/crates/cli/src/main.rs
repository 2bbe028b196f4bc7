use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msdformer_cli::config::{resolve, Overrides};
use msdformer_cli::pipeline::{run, Command};
use msdformer_cli::presets;

#[derive(Parser)]
#[command(name = "msdformer", version, about = "Multi-scale discrete time-series generation")]
struct Cli {
    /// JSON configuration file, layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in dataset preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a field, e.g. `--set tokenizer.vocab=[128,128]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed applied to every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the multi-scale tokenizer (stage 1).
    TrainTokenizer,
    /// Train the autoregressive transformer on tokenized windows (stage 2).
    TrainTransformer,
    /// Sample token sequences and decode them into series.
    Generate,
    /// Score generated series against held-out windows.
    Evaluate,
    /// Sweep the single- vs multi-scale rate comparison.
    RdAnalysis,
    /// Run the invariant suites.
    Selftest,
    /// Print the resolved configuration.
    ShowConfig,
    /// List built-in presets.
    Presets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        preset: cli.preset,
        config: cli.config,
        set: cli.set,
        seed: cli.seed,
        out: cli.out,
    };
    let command = match cli.command {
        Cmd::Presets => {
            for name in presets::names() {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
        Cmd::ShowConfig => {
            return match resolve(&overrides).and_then(|c| Ok(serde_json::to_string_pretty(&c)?)) {
                Ok(text) => {
                    println!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            };
        }
        Cmd::TrainTokenizer => Command::TrainTokenizer,
        Cmd::TrainTransformer => Command::TrainTransformer,
        Cmd::Generate => Command::Generate,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::RdAnalysis => Command::RdAnalysis,
        Cmd::Selftest => Command::SelfTest,
    };
    match resolve(&overrides).and_then(|cfg| run(command, &cfg)) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: msdformer_cli::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}
