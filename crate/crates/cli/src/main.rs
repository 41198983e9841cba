use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vesselforge::{emit_reports, parse_config, run_stages, PipelineError, Stage, StageStatus};

#[derive(Parser, Debug)]
#[command(name = "vesselforge", version, about = "Vessel segmentation, meshing and deformation pipeline")]
struct Cli {
    /// `pipeline` runs the configured stage list; a stage name runs only that stage.
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = parse_config(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let plan = match cli.command.as_str() {
        "pipeline" => cfg.ordered_stages(),
        other => vec![Stage::parse(other).ok_or_else(|| {
            PipelineError::Config(format!("unknown command {other:?}; expected pipeline or a stage name"))
        })?],
    };
    let out = cli.out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("vesselforge-run"));
    let report = run_stages(&cfg, &plan, &out)?;
    for (stage, status) in &report.stages {
        let tag = if *status == StageStatus::Cached { "cached" } else { "done" };
        eprintln!("{stage}: {tag}");
    }
    let summary = emit_reports(&out)?;
    for note in &summary.notes {
        eprintln!("note: {note}");
    }
    println!("{}", out.join(vesselforge::reports::SUMMARY_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
