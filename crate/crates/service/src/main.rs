use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hrc_core::correction::OverrideRegistry;
use hrc_core::metrics::{render_report, ReportFormat};
use hrc_core::planner::build_plan;
use hrc_service::{run_suite_file, serve, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "hrc",
    version,
    about = "Language-commanded desk robot with demonstration-based correction"
)]
struct Cli {
    /// Service config file (TOML or JSON). HRC_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Run an experiment suite headless and print or write the metrics table.
    Run {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override store to apply during the trials.
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
    /// Plan one command and print the plan as JSON.
    Plan {
        command: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig, String> {
    let mut config = match path {
        Some(p) => ServiceConfig::load(p).map_err(|e| e.to_string())?,
        None => ServiceConfig::default(),
    };
    config
        .apply_env(std::env::vars())
        .map_err(|e| e.to_string())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), String> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve { bind } => {
            if let Some(bind) = bind {
                config.bind = bind;
            }
            let base = match &cli.config {
                Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
                None => std::env::current_dir().map_err(|e| e.to_string())?,
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            eprintln!("listening on {}", config.bind);
            runtime
                .block_on(serve(config, base))
                .map_err(|e| e.to_string())
        }
        Command::Run {
            suite,
            format,
            out,
            overrides,
        } => {
            let overrides = match overrides {
                Some(p) => OverrideRegistry::load(&p).map_err(|e| e.to_string())?,
                None => OverrideRegistry::new(),
            };
            let rows = run_suite_file(&suite, &overrides).map_err(|e| e.to_string())?;
            let report = render_report(&rows, format).map_err(|e| e.to_string())?;
            match out {
                Some(path) => {
                    std::fs::write(&path, report).map_err(|e| format!("{}: {e}", path.display()))
                }
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
        Command::Plan { command, seed } => {
            let backend = config.build_backend().map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(config.seed));
            let plan = build_plan(&command, &backend, &mut rng).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&plan).expect("plan serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hrc: {e}");
            ExitCode::FAILURE
        }
    }
}
