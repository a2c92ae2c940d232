use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use swe_forge::pipeline::{Pipeline, PipelineConfig, Stage};

/// Mine merged-PR commit pairs into execution-verified task instances.
#[derive(Parser)]
#[command(name = "swe-forge", version)]
struct Cli {
    /// mine | filter | build-env | execute | classify | package | gate-replay | report
    stage: Stage,
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Redo work already recorded as complete.
    #[arg(long)]
    force: bool,
    /// Process at most N candidates in this invocation.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Print the report as JSON instead of a table (report stage only).
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match PipelineConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut pipeline = Pipeline::new(config);
    pipeline.force = cli.force;
    pipeline.limit = cli.limit;

    let result = if cli.stage == Stage::Report {
        pipeline.report().map(|(report, summary)| {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", summary.message);
            }
        })
    } else {
        pipeline.run_stage(cli.stage).map(|s| println!("{}: {}", s.stage, s.message))
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
