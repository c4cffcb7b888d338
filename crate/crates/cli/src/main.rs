//! Command-line front end: `simulate`, `verify`, `estimate` and `report`.
//!
//! Exit codes: 0 when every judged check passes, 1 when any fails, 2 on a
//! configuration error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use choice_lab::experiment::{
    is_config_error, parse_check_list, run_estimate, run_simulate, run_verify, with_threads,
    ExperimentConfig, Overrides,
};
use choice_lab::report::{summary_json, summary_table, write_csv, DerivativeReport};
use choice_lab::Error;

const THREADS_VAR: &str = "CHOICE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "choice-lab", version, about = "Choice probability derivatives and their structural identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sample from the primary design.
    Simulate(RunArgs),
    /// Run the configured checks and write a report.
    Verify(RunArgs),
    /// Simulate a sample and run the kernel estimators on it.
    Estimate(RunArgs),
    /// Consolidate the summaries found in a directory.
    Report {
        /// Directory holding `*summary.json` files.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated check list replacing the configured one.
    #[arg(long)]
    checks: Option<String>,
    /// Relative tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_config_error(&e) {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_path(&args.config).map_err(|e| match e {
        Error::Io(m) => Failure::Config(m),
        other => Failure::from(other),
    })?;
    let checks = args.checks.as_deref().map(parse_check_list).transpose()?;
    if let Some(t) = args.tolerance {
        if !(t >= 0.0) {
            return Err(Failure::Config("--tolerance must be nonnegative".into()));
        }
    }
    cfg.apply(&Overrides {
        seed: args.seed,
        draws: args.draws,
        checks,
        tolerance: args.tolerance,
        out: args.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Failure::Config(format!("{THREADS_VAR} must be a positive integer"))),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_reports(dir: &Path, stem: &str, reports: &[DerivativeReport]) -> Result<Value, Failure> {
    let csv = dir.join(format!("{stem}.csv"));
    let f = fs::File::create(&csv).map_err(|e| io_err(&csv, e))?;
    write_csv(reports, &mut BufWriter::new(f)).map_err(|e| io_err(&csv, e))?;
    let summary = summary_json(reports);
    let js = dir.join(format!("{stem}_summary.json"));
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&js, text + "\n").map_err(|e| io_err(&js, e))?;
    Ok(summary)
}

fn verdict(reports: &[DerivativeReport]) -> ExitCode {
    if reports.iter().any(|r| r.failed()) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<ExitCode, Failure> {
    let cfg = load(args)?;
    let sample = with_threads(threads()?, || run_simulate(&cfg))??;
    let dir = out_dir(&cfg)?;
    let path = dir.join(sample.file_name());
    let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    sample
        .write_csv(&mut BufWriter::new(f))
        .map_err(|e| io_err(&path, e))?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &RunArgs) -> Result<ExitCode, Failure> {
    let cfg = load(args)?;
    let reports = with_threads(threads()?, || run_verify(&cfg))??;
    let summary = write_reports(&out_dir(&cfg)?, "verify", &reports)?;
    print!("{}", summary_table(&summary));
    Ok(verdict(&reports))
}

fn cmd_estimate(args: &RunArgs) -> Result<ExitCode, Failure> {
    let cfg = load(args)?;
    let reports = with_threads(threads()?, || run_estimate(&cfg))??;
    let summary = write_reports(&out_dir(&cfg)?, "estimate", &reports)?;
    print!("{}", summary_table(&summary));
    Ok(verdict(&reports))
}

fn cmd_report(dir: &Path) -> Result<ExitCode, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("_summary.json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Config(format!("no *_summary.json files in {}", dir.display())));
    }
    let mut items = Vec::new();
    let mut sources = Vec::new();
    for p in &files {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        let reps = v["reports"]
            .as_array()
            .ok_or_else(|| Failure::Config(format!("{}: missing `reports`", p.display())))?;
        items.extend(reps.iter().cloned());
        sources.push(p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string());
    }
    let count = |s: &str| items.iter().filter(|r| r["status"] == s).count();
    let failed = count("fail");
    let merged = json!({
        "sources": sources,
        "failed": failed,
        "passed": count("pass"),
        "total": items.len(),
        "reports": items,
    });
    let table = summary_table(&merged);
    let js = dir.join("consolidated.json");
    let text = serde_json::to_string_pretty(&merged).expect("summary serializes");
    fs::write(&js, text + "\n").map_err(|e| io_err(&js, e))?;
    let txt = dir.join("consolidated.txt");
    fs::write(&txt, &table).map_err(|e| io_err(&txt, e))?;
    print!("{table}");
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Report { dir } => cmd_report(dir),
    };
    match res {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
