use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dbe_core::harness::{self, presets, HarnessError, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "dbe", version, about = "Deterministic business-ecosystem network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and report its metrics.
    Run {
        /// Scenario file, or `preset:<name>`.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics and trace; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run two scenarios and tabulate their metrics side by side.
    Compare {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Metric to compare; all when omitted. Repeatable.
        #[arg(long)]
        metric: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Re-check an exported trace offline.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write every bundled preset as a scenario file.
    Presets {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(spec: &str) -> Result<Scenario, ScenarioError> {
    match spec.strip_prefix("preset:") {
        Some(name) => presets::preset(name).ok_or_else(|| ScenarioError::Io(format!("unknown preset {name:?}"))),
        None => Scenario::load(Path::new(spec)),
    }
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn write_file(path: &Path, text: &str) -> Result<(), ExitCode> {
    std::fs::write(path, text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn run(spec: &str, seed: Option<u64>, out: Option<PathBuf>, format: Format) -> Result<ExitCode, ExitCode> {
    let mut sc = load(spec).map_err(config_error)?;
    if let Some(s) = seed {
        sc.config.seed = s;
    }
    sc.validate().map_err(config_error)?;
    let header = harness::config_header(&sc);
    print!("{header}");
    let (output, report) = harness::run(&sc).map_err(config_error)?;
    let body = match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| config_error(format!("{}: {e}", dir.display())))?;
            let ext = match format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            write_file(&dir.join(format!("metrics.{ext}")), &body)?;
            write_file(&dir.join("trace.txt"), &output.trace.export())?;
            write_file(&dir.join("scenario.txt"), &sc.write())?;
            println!("# trace digest {}", output.trace.digest_hex());
        }
        None => print!("{body}"),
    }
    let check = harness::verify(&output.trace);
    let violations = output.violation_count();
    if violations > 0 || !check.ok() {
        for v in output
            .audit
            .atomicity_violations
            .iter()
            .chain(&output.audit.consistency_violations)
            .chain(&output.protocol_violations)
        {
            eprintln!("violation: {v}");
        }
        for f in &check.failures {
            eprintln!("trace check failed: {f}");
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(a: &str, b: &str, metrics: &[String], format: Format) -> Result<ExitCode, ExitCode> {
    let sa = load(a).map_err(config_error)?;
    let sb = load(b).map_err(config_error)?;
    print!("{}", harness::config_header(&sa));
    print!("{}", harness::config_header(&sb));
    match harness::compare(&sa, &sb, metrics) {
        Ok(table) => {
            match format {
                Format::Csv => print!("{}", table.to_csv()),
                Format::Json => println!("{}", table.to_json()),
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ (HarnessError::Scenario(_) | HarnessError::IncomparableScenarios(_))) => Err(config_error(e)),
    }
}

fn verify(path: &Path) -> Result<ExitCode, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let r = harness::verify_text(&text);
    if r.ok() {
        println!("ok: {} entries", r.entries);
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &r.failures {
            println!("FAIL: {f}");
        }
        Ok(ExitCode::from(1))
    }
}

fn write_presets(dir: &Path) -> Result<ExitCode, ExitCode> {
    std::fs::create_dir_all(dir).map_err(|e| config_error(format!("{}: {e}", dir.display())))?;
    for sc in presets::all() {
        let path = dir.join(format!("{}.scn", sc.config.name));
        write_file(&path, &sc.write())?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Run { scenario, seed, out, format } => run(&scenario, seed, out, format),
        Command::Compare { a, b, metric, format } => compare(&a, &b, &metric, format),
        Command::Verify { trace } => verify(&trace),
        Command::Presets { out } => write_presets(&out),
    };
    r.unwrap_or_else(|code| code)
}
