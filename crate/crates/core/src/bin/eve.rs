//! `eve` command line: runs the full pipeline or a single stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use eve_core::config::{parse_sweep, RunConfig, SEED_ENV};
use eve_core::pipeline::{Pipeline, PipelineOptions, Stage, STAGES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    PrepareData,
    Train,
    Evaluate,
    Select,
    Calibrate,
    AgenticEval,
    Report,
    Run,
}

impl StageArg {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            StageArg::PrepareData => Stage::PrepareData,
            StageArg::Train => Stage::Train,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::Select => Stage::Select,
            StageArg::Calibrate => Stage::Calibrate,
            StageArg::AgenticEval => Stage::AgenticEval,
            StageArg::Report => Stage::Report,
            StageArg::Run => return None,
        })
    }
}

/// Exit codes: 0 success, 2 config error, 3 stage failure, 4 verification failure.
#[derive(Debug, Parser)]
#[command(name = "eve", version, about = "Train, select, calibrate and evaluate EVE/DET backbones")]
struct Cli {
    /// Stage to run; also accepted as `--stage`.
    #[arg(value_enum)]
    command: Option<StageArg>,
    #[arg(long, value_enum, conflicts_with = "command")]
    stage: Option<StageArg>,
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this seed's retained checkpoint instead of the rule's choice.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Stage-1 search, e.g. `lambda_band_high=2.00,2.05,2.10`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(short, long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fail = |code: u8, msg: String| {
        eprintln!("error: {msg}");
        ExitCode::from(code)
    };

    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => return fail(2, e.to_string()),
        },
        None => RunConfig::default(),
    };
    if let Err(e) = cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref()) {
        return fail(2, e.to_string());
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let sweep = match cli.sweep.as_deref().map(parse_sweep).transpose() {
        Ok(s) => s,
        Err(e) => return fail(2, e.to_string()),
    };
    let opts = PipelineOptions {
        seed_override: cli.seed_override,
        sweep,
        verbose: !cli.quiet,
    };
    let pipeline = match Pipeline::new(cfg, opts) {
        Ok(p) => p,
        Err(e) => return fail(e.exit_code() as u8, e.to_string()),
    };

    let which = cli.command.or(cli.stage).unwrap_or(StageArg::Run);
    let result = match which.stage() {
        Some(stage) => pipeline.run_stage(stage),
        None => pipeline.run_all(),
    };
    match result {
        Ok(outcome) => {
            if which == StageArg::Run || which == StageArg::Report {
                eprintln!("reports written to {}", pipeline.out.join("reports").display());
            }
            if !outcome.missing_reports.is_empty() {
                eprintln!("missing tables: {}", outcome.missing_reports.join(", "));
            }
            if outcome.verification_passed == Some(false) {
                return fail(4, "agentic verification failed".into());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stages: {}", STAGES.map(|s| s.name()).join(" -> "));
            fail(e.exit_code() as u8, e.to_string())
        }
    }
}
