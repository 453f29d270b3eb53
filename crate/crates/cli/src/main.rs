//! `ketlab`: train language-model variants, compare them, run block-completion
//! suites and diagnostics. Artifacts land under `results/` (or `$KETLAB_OUT`).

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ketlab", version, about = "Causal and predict-detach sequence model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one language-model variant.
    Train {
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        common: Common,
        /// Also write a binary checkpoint under `checkpoints/`.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Train several variants under the same settings and tabulate them.
    Compare {
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_values_t = commands::STRICT_CAUSAL.map(String::from))]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Block-completion runs; rows are appended to `all_runs.csv`.
    Block {
        #[arg(long, value_enum)]
        objective: Option<Objective>,
        #[arg(long, value_enum)]
        backbone: Option<Backbone>,
        #[arg(long)]
        layers: Option<usize>,
        /// Comma-separated seeds; defaults to 7,11,17,19,1337.
        #[arg(long = "seeds", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run one diagnostic and write its report.
    Diagnose {
        /// Variant, or `ket_quadratic` / `ket_incidence` for the scaling probe.
        #[arg(long)]
        variant: String,
        #[arg(long, value_enum)]
        probe: Probe,
        /// Sequence lengths for the scaling probe.
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512, 1024])]
        seq_lens: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize every run found under the output root.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by all run commands. Precedence: preset, then the config
/// file, then `--set` pairs, then the dedicated flags.
#[derive(Args, Clone, Debug)]
struct Common {
    /// Whitespace-tokenized text file, or `synthetic` for the bundled corpus.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output root; defaults to `$KETLAB_OUT`, else `results`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Objective {
    Direct,
    Denoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Backbone {
    Tf,
    Ket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Probe {
    Causality,
    Leakage,
    Detach,
    Scaling,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { variant, common, checkpoint } => commands::train(&variant, &common, checkpoint),
        Command::Compare { variants, common } => commands::compare(&variants, &common),
        Command::Block { objective, backbone, layers, seeds, common } => {
            commands::block(objective, backbone, layers, &seeds, &common)
        }
        Command::Diagnose { variant, probe, seq_lens, common } => commands::diagnose(&variant, probe, &seq_lens, &common),
        Command::Report { out } => commands::report(out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("ketlab: a run finished but one of its checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("ketlab: {e}");
            ExitCode::from(2)
        }
    }
}
