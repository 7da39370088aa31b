use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{debug, warn};

use recontext::config::{load_config, LoadedConfig};
use recontext::human_eval::http::serve;
use recontext::pipeline::{parse_stages, Pipeline, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "recontext", version, about = "Augment few-shot product photos, fine-tune, generate, rank and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages for every product in the config.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Comma-separated stages; all stages when omitted.
        #[arg(long)]
        stages: Option<String>,
        /// Overrides the config seed (and so the derived run id).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Queue ranked images for rating and serve the rater API.
    ServeEval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Rebuild and print the metrics table for the configured run.
    Report {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<LoadedConfig, PipelineError> {
    let mut loaded = load_config(path)?;
    if let Some(seed) = seed {
        loaded.config.seed = seed;
    }
    for w in &loaded.warnings {
        warn!("{w}");
    }
    Ok(loaded)
}

fn run(config: &Path, stages: Option<&str>, seed: Option<u64>) -> Result<(), PipelineError> {
    let stages = match stages {
        Some(s) => parse_stages(s)?,
        None => Stage::ALL.to_vec(),
    };
    let pipeline = Pipeline::new(load(config, seed)?)?;
    debug!("effective config:\n{}", pipeline.config().echo());
    let summary = pipeline.run(&stages)?;
    println!("run {}", summary.run_id);
    for p in &summary.products {
        let ranked = summary.ranked.get(p).map(Vec::len).unwrap_or(0);
        let records = summary.content_hashes.get(p).map(Vec::len).unwrap_or(0);
        println!("  {p}: {records} manifest records, {ranked} ranked images");
    }
    println!("outputs in {}", pipeline.run_dir().display());
    Ok(())
}

fn serve_eval(config: &Path, port: Option<u16>) -> Result<(), PipelineError> {
    let loaded = load(config, None)?;
    let port = port.unwrap_or(loaded.config.eval.port);
    let pipeline = Pipeline::new(loaded)?;
    let (service, queued) = pipeline.eval_service()?;
    println!("queued {queued} new images for rating; ratings log at {}", service.log_path().display());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Setup(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .map_err(|e| PipelineError::Setup(format!("cannot bind port {port}: {e}")))?;
        println!("rater API listening on http://{}", listener.local_addr().map_err(|e| PipelineError::Setup(e.to_string()))?);
        serve(listener, Arc::new(service)).await.map_err(|e| PipelineError::Setup(e.to_string()))
    })
}

fn report(config: &Path) -> Result<(), PipelineError> {
    let pipeline = Pipeline::new(load(config, None)?)?;
    pipeline.run(&[Stage::Report])?;
    let path = pipeline.run_dir().join("metrics_table.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Setup(format!("{}: {e}", path.display())))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, stages, seed } => run(config, stages.as_deref(), *seed),
        Command::ServeEval { config, port } => serve_eval(config, *port),
        Command::Report { config } => report(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
