use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use delayflow::backend::BackendKind;
use delayflow::eval::ModelKind;
use delayflow::pipeline::{self, RunConfig};

/// Passenger-flow forecasting under metro delays with refined prompt templates.
#[derive(Parser)]
#[command(name = "delayflow", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// TOML run configuration. Without one the synthetic dataset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Forecasting backend: mock or remote.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Output root for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated models, e.g. ha,sn,arima,p1,p2.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Report on delay-window tasks only (true) or on all tasks (false).
    #[arg(long, global = true)]
    focus_delay: Option<bool>,
    /// Override any config key, e.g. --set backend.max_in_flight=8.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic AFC, event and adjacency dataset.
    Synth {
        /// Target directory (default: {out}/synth).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Parse, clean and aggregate AFC records into flows.csv.
    Ingest {
        /// Target directory (default: {out}/ingest).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run the full experiment and write a run directory.
    Run,
    /// Screen and score the template library on validation tasks.
    ScoreTemplates,
    /// Print the stored reports of a finished run.
    Report {
        run_dir: PathBuf,
    },
}

fn load_config(g: &GlobalOpts) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for item in &g.set {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{item}'"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut config = RunConfig::load(g.config.as_deref(), &overrides)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(kind) = g.backend {
        config.backend.kind = kind;
    }
    if let Some(out) = &g.out {
        config.out = out.clone();
    }
    if let Some(models) = &g.models {
        if models.is_empty() {
            bail!("--models must name at least one model");
        }
        config.models = models.clone();
    }
    if let Some(focus) = g.focus_delay {
        config.focus_delay = focus;
    }
    config.sync_seed();
    Ok(config)
}

fn run(cli: Cli) -> Result<i32> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { dir } => {
            let dir = dir.unwrap_or_else(|| config.out.join("synth"));
            let s = pipeline::cmd_synth(&config, &dir)?;
            println!(
                "wrote {} records, {} events for {} stations over {} days to {}",
                s.n_records,
                s.n_events,
                s.n_stations,
                s.n_days,
                s.dir.display()
            );
        }
        Command::Ingest { dir } => {
            let dir = dir.unwrap_or_else(|| config.out.join("ingest"));
            let s = pipeline::cmd_ingest(&config, &dir)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} records ({} rejected, {} outside service hours, {} unknown station) -> {} series, \
                 inflow {} outflow {}; {} outliers replaced",
                s.n_records,
                s.rejected,
                s.dropped_outside_hours,
                s.dropped_unknown_station,
                s.n_series,
                s.inflow_total,
                s.outflow_total,
                s.outliers_replaced
            );
            println!("flows written to {}", dir.join(pipeline::FLOWS_FILE).display());
        }
        Command::Run => {
            let s = pipeline::cmd_run(&config)?;
            println!("{}", s.headline);
            println!("run {} written to {}", s.run_id, s.run_dir.display());
            if s.exit_code != 0 {
                eprintln!("at least one model is incomplete; see manifest.json");
            }
            return Ok(s.exit_code);
        }
        Command::ScoreTemplates => {
            let s = pipeline::cmd_score_templates(&config)?;
            println!(
                "scored {} of {} templates on {} validation tasks; best: {}",
                s.n_templates - s.n_screened_out,
                s.n_templates,
                s.n_validation_tasks,
                s.best
            );
            println!("scores written to {}", s.run_dir.join("scores.csv").display());
        }
        Command::Report { run_dir } => {
            let (text, code) = pipeline::cmd_report(&run_dir)?;
            println!("{text}");
            return Ok(code);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
