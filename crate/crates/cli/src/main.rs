use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mvrc_cli::{run_stage, CliError, RunConfig, RunDir, Stage};

/// Data generation, SFT, curation, reward finetuning, evaluation,
/// distortion curves, scaling runs and plots for the toy multi-view model.
#[derive(Debug, Parser)]
#[command(name = "mvrc", version)]
struct Args {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// gen-data, sft, curate, rlft, eval, distort, scale, plot or all.
    #[arg(long, default_value = "all")]
    stage: String,
}

fn run(args: &Args) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::from_toml(&raw)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if args.workers == 0 {
        return Err(CliError::Config("--workers must be >= 1".into()));
    }
    let stages = if args.stage == "all" { Stage::PIPELINE.to_vec() } else { vec![Stage::parse(&args.stage)?] };
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let dir = RunDir::create(&cfg.out_dir)?;
    std::fs::write(dir.root.join("config.toml"), &raw)?;
    std::fs::write(dir.root.join("config.effective.toml"), cfg.to_toml())?;
    for stage in stages {
        println!("{}", run_stage(stage, &cfg, &dir)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
