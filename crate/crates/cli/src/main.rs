use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffsqueeze::fwm_source::{self, PRESET_NAMES};
use ffsqueeze_cli::config::{self, ConfigFile, Overrides, Resolved};
use ffsqueeze_cli::report::{self, RunReport};
use ffsqueeze_cli::{commands, CliError, EXIT_PASS, EXIT_TOLERANCE};

#[derive(Parser)]
#[command(name = "ffsqueeze", version, about = "Feedforward transfer of twin-beam squeezing onto a single beam")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form predictions for a scenario.
    Predict(RunArgs),
    /// Monte Carlo run of the feedforward chain, compared with its prediction.
    Simulate(RunArgs),
    /// Recover the delay mismatch from the spectral oscillation and rerun
    /// with the matching delay line.
    OptimizeDelay(RunArgs),
    /// Built-in scenarios.
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
    /// Re-render a saved JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Subcommand)]
enum ScenarioAction {
    List,
    /// Print the fully resolved configuration of a scenario.
    Show { name: String },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name; overrides the file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Welch averages per spectrum (default: all the trace allows).
    #[arg(long)]
    averages: Option<usize>,
    /// Run without the probe delay line.
    #[arg(long)]
    no_compensate: bool,
    /// Simulated trace duration (s).
    #[arg(long)]
    duration: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, env = "FFSQUEEZE_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Write only this format (default: both).
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn resolve(args: &RunArgs) -> Result<Resolved, CliError> {
    let overrides = Overrides {
        scenario: args.scenario.clone(),
        seed: args.seed,
        averages: args.averages,
        no_compensate: args.no_compensate,
        duration: args.duration,
    };
    let mut file = match &args.config {
        Some(path) => config::read_file(path)?,
        None => ConfigFile::default(),
    };
    config::apply_overrides(&mut file, &overrides);
    Ok(config::resolve(&file)?)
}

fn write_outputs(report: &RunReport, output: &OutputArgs) -> Result<(), CliError> {
    let stem = report.file_stem();
    if output.format != Some(Format::Json) {
        report::emit_csv(report, &output.out_dir.join(format!("{stem}.csv")))?;
    }
    if output.format != Some(Format::Csv) {
        report::emit_json(report, &output.out_dir.join(format!("{stem}.json")))?;
    }
    Ok(())
}

fn finish(report: &RunReport, output: &OutputArgs) -> Result<i32, CliError> {
    write_outputs(report, output)?;
    print!("{}", report::render_summary(report));
    Ok(if report.passed() { EXIT_PASS } else { EXIT_TOLERANCE })
}

fn show_scenario(name: &str) -> Result<i32, CliError> {
    let file = ConfigFile {
        scenario: Some(name.to_string()),
        ..ConfigFile::default()
    };
    let resolved = config::resolve(&file)?;
    print!("{}", resolved.echo());
    let preset = &resolved.preset;
    for (k, v) in &preset.metadata {
        println!("# {k}: {v}");
    }
    let anchors = serde_json::to_string(&preset.anchors).unwrap_or_default();
    println!("# anchors: {anchors}");
    Ok(EXIT_PASS)
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Predict(args) => finish(&commands::cmd_predict(&resolve(&args)?)?, &args.output),
        Command::Simulate(args) => finish(&commands::cmd_simulate(&resolve(&args)?)?, &args.output),
        Command::OptimizeDelay(args) => {
            finish(&commands::cmd_optimize_delay(&resolve(&args)?)?, &args.output)
        }
        Command::Scenario { action: ScenarioAction::List } => {
            for name in PRESET_NAMES {
                let p = fwm_source::preset(name)?;
                println!("{name:<28} S- {:+.1} dB, eta_E {}, eta_D {}", p.twin_noise_db, p.eta_e, p.eta_d);
            }
            Ok(EXIT_PASS)
        }
        Command::Scenario { action: ScenarioAction::Show { name } } => show_scenario(&name),
        Command::Report { input, output } => {
            let report = report::read_json(Path::new(&input))?;
            finish(&report, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
