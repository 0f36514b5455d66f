use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use roulette_core::config::{load_config, LoadedConfig, Preset};
use roulette_core::harness::{run_training, write_run, Mode};
use roulette_core::suite::{
    describe, emit_all_reports, emit_report, load_suite, run_paired_suite, write_suite,
    ReportFormat,
};

/// Optimizer-roulette training runs, paired suites, and reports.
#[derive(Parser, Debug)]
#[command(name = "roulette", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a single run and write epochs.log and summary.json.
    Run(RunArgs),
    /// Run every seed in both modes and write the suite directory and reports.
    Suite(SuiteArgs),
    /// Rebuild report files from a stored suite directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults: `reference` or `demo`.
    #[arg(long, default_value = "reference")]
    preset: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Default parent for output directories.
    #[arg(
        long,
        env = "ROULETTE_OUT_ROOT",
        default_value = "runs",
        hide_env_values = true
    )]
    out_root: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// `roulette` or `simple`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[command(flatten)]
    common: Common,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    suite_dir: PathBuf,
    /// summary_csv, milestones_csv, paired_json, plotdata_csv, or all.
    #[arg(long, default_value = "all")]
    format: String,
}

/// Exit status plus the error to print.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn load(common: &Common) -> Result<LoadedConfig, Failure> {
    let preset: Preset = common.preset.parse().map_err(usage)?;
    load_config(common.config.as_deref(), preset).map_err(usage)
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.is_file() {
        return Err(usage(anyhow!(
            "{} exists and is not a directory",
            dir.display()
        )));
    }
    let non_empty = dir
        .read_dir()
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(false);
    if non_empty && !force {
        return Err(usage(anyhow!(
            "{} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = load(&args.common)?;
    if let Some(mode) = &args.mode {
        config.run.mode = mode.parse::<Mode>().map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    config.sync();
    let run = config.run;
    let out = args.common.out.unwrap_or_else(|| {
        args.common
            .out_root
            .join(format!("{}-{}", run.mode, run.seed))
    });
    prepare_out(&out, args.common.force)?;

    let outcome = run_training(&run).map_err(runtime)?;
    write_run(&out, &outcome).map_err(runtime)?;
    let s = &outcome.summary;
    say(&format!(
        "{} seed={} epochs={} best_val_acc={:.4} test_acc={:.4} -> {}",
        s.mode,
        s.seed,
        s.epochs_completed,
        s.best_val_acc,
        s.test_acc,
        out.display()
    ));
    match &s.failure {
        Some(diag) => Err(runtime(anyhow!("run stopped on numerical failure: {diag}"))),
        None => Ok(()),
    }
}

fn cmd_suite(args: SuiteArgs) -> Result<(), Failure> {
    let mut config = load(&args.common)?;
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(usage(anyhow!("--jobs must be at least 1")));
        }
        config.jobs = jobs;
    }
    let out = args
        .common
        .out
        .unwrap_or_else(|| args.common.out_root.join(&config.suite.name));
    prepare_out(&out, args.common.force)?;

    let outputs = run_paired_suite(&config.suite, config.jobs).map_err(runtime)?;
    write_suite(&outputs, &out).map_err(runtime)?;
    emit_all_reports(&outputs, &out).map_err(runtime)?;
    say(describe(&outputs).trim_end());
    say(&format!("{} runs -> {}", outputs.runs.len(), out.display()));
    let failures = outputs.failures();
    for (label, mode, diag) in &failures {
        eprintln!("run {label}/{mode} failed: {diag}");
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let formats: Vec<ReportFormat> = if args.format == "all" {
        ReportFormat::ALL.to_vec()
    } else {
        vec![args.format.parse().map_err(usage)?]
    };
    let outputs = load_suite(&args.suite_dir).map_err(runtime)?;
    if formats.len() == ReportFormat::ALL.len() {
        for path in emit_all_reports(&outputs, &args.suite_dir).map_err(runtime)? {
            say(&path.display().to_string());
        }
    } else {
        for f in formats {
            let path = emit_report(&outputs, f, &args.suite_dir).map_err(runtime)?;
            say(&path.display().to_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
