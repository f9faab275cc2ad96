use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use factree::config::parse_config;
use factree::harness::{read_records, run, simulate, write_records, SimScenario, Stage};
use factree::Error;

#[derive(Parser)]
#[command(name = "factree", version, about = "Factor-graph estimation over a problem tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario into a capture log and a ground-truth log.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Replay a capture log through a configured problem.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "metrics")]
        truth: Option<PathBuf>,
        #[arg(long, requires = "truth")]
        metrics: Option<PathBuf>,
        /// Print the final problem tree to stdout.
        #[arg(long)]
        print_tree: bool,
    },
}

const CONFIG_ERROR: u8 = 2;
const DATA_ERROR: u8 = 3;

struct Failure(u8, String);

fn read(path: &Path, code: u8) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(code, format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure(DATA_ERROR, format!("cannot write {}: {e}", path.display())))
}

fn data(e: Error) -> Failure {
    Failure(DATA_ERROR, e.to_string())
}

fn sim(scenario: &Path, out: &Path, truth: &Path) -> Result<(), Failure> {
    let sc =
        SimScenario::from_yaml(&read(scenario, CONFIG_ERROR)?).map_err(|e| Failure(CONFIG_ERROR, e.to_string()))?;
    let (log, gt) = simulate(&sc).map_err(|e| Failure(CONFIG_ERROR, e.to_string()))?;
    write(out, &write_records(&log).map_err(data)?)?;
    write(truth, &write_records(&gt).map_err(data)?)
}

fn replay(
    config: &Path,
    log: &Path,
    out: &Path,
    truth: Option<&Path>,
    metrics: Option<&Path>,
    print_tree: bool,
) -> Result<(), Failure> {
    let server = parse_config(&read(config, CONFIG_ERROR)?).map_err(|e| Failure(CONFIG_ERROR, e.to_string()))?;
    let records = read_records(&read(log, DATA_ERROR)?).map_err(data)?;
    let truth = match truth {
        Some(p) => Some(read_records(&read(p, DATA_ERROR)?).map_err(data)?),
        None => None,
    };
    let output = run(&server, &records, truth.as_deref()).map_err(|e| {
        let code = match e.stage {
            Stage::Config => CONFIG_ERROR,
            Stage::Data => DATA_ERROR,
        };
        Failure(code, e.to_string())
    })?;
    write(out, &write_records(&output.estimate).map_err(data)?)?;
    if let (Some(path), Some(m)) = (metrics, &output.metrics) {
        let text = serde_json::to_string_pretty(m).map_err(|e| data(e.into()))?;
        write(path, &(text + "\n"))?;
    }
    if print_tree {
        print!("{}", output.runner.tree().print_tree());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sim { scenario, out, truth } => sim(scenario, out, truth),
        Command::Run {
            config,
            log,
            out,
            truth,
            metrics,
            print_tree,
        } => replay(config, log, out, truth.as_deref(), metrics.as_deref(), *print_tree),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
