use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedsim::harness::config::{Experiment, Scale};
use fedsim::harness::runner::{self, ArmResult, DataCache};
use fedsim::harness::{self, RECIPES};
use fedsim::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_TARGET: u8 = 3;

#[derive(Parser)]
#[command(name = "fedsim", about = "Deterministic federated-learning simulator", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; writes CSV, SVG and a resolved snapshot.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Run a bundled figure recipe.
    Figure {
        #[arg(value_parser = RECIPES.map(|(n, _)| n))]
        name: String,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the recipe instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Print the version.
    Version,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_config() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn report(arm: &ArmResult) {
    let s = &arm.summary;
    let delay = match s.mean_total_delay {
        Some(d) => format!("{d:.1} s"),
        None => "not reached".into(),
    };
    eprintln!(
        "  {:<16} final accuracy {:.4} +/- {:.4}  failure {}  delay to {} {}",
        arm.label, s.mean_final_accuracy, s.std_final_accuracy, s.failure, arm.config.target_accuracy, delay
    );
}

fn execute(exp: &Experiment, out: &Path) -> Result<u8, Error> {
    eprintln!("{}: {} arm(s), {} repeat(s)", exp.name(), exp.arms.len(), exp.base.repeats);
    let mut cache = DataCache::default();
    let results = runner::run_experiment(exp, &mut cache, report)?;
    let outputs = harness::write_outputs(exp, &results, out)?;
    println!("{}", outputs.csv.display());
    println!("{}", outputs.svg.display());
    let missed = results.iter().any(|a| a.config.stop_accuracy.is_some() && !a.summary.target_reached());
    Ok(if missed { EXIT_TARGET } else { 0 })
}

fn load_config(path: &Path) -> Result<Experiment, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    Experiment::parse(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Version => {
            println!("fedsim {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
        Command::Validate { config } => load_config(&config).map(|exp| {
            println!("{}: ok ({} arm(s))", config.display(), exp.arms.len());
            0
        }),
        Command::Run { config, out } => load_config(&config).and_then(|exp| {
            let dir = out.unwrap_or_else(|| exp.base.output_dir.clone());
            execute(&exp, &dir)
        }),
        Command::Figure { name, scale, out, print } => {
            let text = harness::recipe(&name).expect("clap restricts names");
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
            Experiment::parse_scaled(text, scale).and_then(|exp| {
                if print {
                    print!("{}", exp.snapshot()?);
                    return Ok(0);
                }
                let dir = out.unwrap_or_else(|| exp.base.output_dir.clone());
                execute(&exp, &dir)
            })
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
