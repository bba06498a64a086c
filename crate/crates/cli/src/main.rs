mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fieldasr_core::filter::Criterion;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fieldasr", version, about = "Corpus preparation, officer speech detection and ASR evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; also sizes subprocess engine pools.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed; per-stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Filter criterion: c1, c2, c3 or c4.
    #[arg(long, global = true)]
    criterion: Option<Criterion>,
    /// Output directory (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into paths.audio_root.
    Synth,
    /// Partition a manifest into train, validation, test and withheld stops.
    Split {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Propose and select utterance timestamps for a manifest.
    Align {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Keep aligned utterances passing the configured criterion.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the officer chunk scorer.
    TrainDetector {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Tune detection thresholds on the validation stops.
    Tune {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Detect officer speech segments.
    Detect {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Transcribe hand-aligned utterances and detected segments.
    Transcribe {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// Score transcripts: WER/CER, subgroup table and regression.
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory holding utterances.jsonl and detected.jsonl.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
    },
    /// Serve configured in-process engines over the line protocol on stdio.
    Serve {
        #[arg(long)]
        transcriber: Option<String>,
        #[arg(long)]
        aligner: Option<String>,
        #[arg(long)]
        scorer: Option<String>,
    },
}

fn run(cli: Cli) -> Result<Option<serde_json::Value>> {
    let g = cli.global;
    let path = g.config.ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let overrides = config::Overrides { jobs: g.jobs, seed: g.seed, criterion: g.criterion, out: g.out };
    let loaded = config::load(&path, &overrides)?;
    let v = match &cli.command {
        Command::Synth => commands::synth(&loaded)?,
        Command::Split { input } => commands::split(&loaded, input)?,
        Command::Align { input } => commands::align(&loaded, input)?,
        Command::Filter { input, report } => commands::filter(&loaded, input, report)?,
        Command::TrainDetector { input } => commands::train_detector(&loaded, input)?,
        Command::Tune { input, model } => commands::tune(&loaded, input, model)?,
        Command::Detect { input, model, thresholds } => commands::detect(&loaded, input, model, thresholds)?,
        Command::Transcribe { input, segments } => commands::transcribe(&loaded, input, segments)?,
        Command::Evaluate { input, hypotheses } => commands::evaluate(&loaded, input, hypotheses)?,
        Command::Serve { transcriber, aligner, scorer } => {
            commands::serve_stdio(&loaded, transcriber, aligner, scorer)?;
            return Ok(None);
        }
    };
    Ok(Some(v))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Some(v)) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "ok": false, "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
