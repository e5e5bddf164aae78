//! `procwasm`: run command files under the in-process kernel, validate
//! outputs and build slowdown reports.
//!
//! Exit codes: 0 on success, 1 when a guest fails or validation finds a
//! difference, 2 on a harness error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use procwasm::fixtures;
use procwasm::guest_exec::ShimConfig;
use procwasm::harness::{
    self, archive_results, counters, overhead_percent, validate_outputs, CommandFile, FileOutcome, Harness,
    HarnessConfig, ProviderKind, RunRecord, RESULTS_ROOT,
};
use procwasm::kernel::FsImage;
use procwasm::stats_report as stats;

/// Name of the record file `run` writes into its output directory.
const RECORDS_FILE: &str = "records.json";

#[derive(Parser)]
#[command(
    name = "procwasm",
    version,
    about = "Unix-like processes for WebAssembly guests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a command file for a number of iterations.
    Run(RunArgs),
    /// Compare two host directory trees byte by byte.
    Validate { expected: PathBuf, actual: PathBuf },
    /// Build a slowdown report from one or more `run` output directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// System treated as the baseline; defaults to the first directory's.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Inspect or install the bundled guest programs.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    cmdfile: PathBuf,
    /// Host directory mirrored as the guest filesystem root.
    #[arg(long)]
    fsimage: PathBuf,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = ProviderKind::Null)]
    counters: ProviderKind,
    #[arg(long, default_value_t = ShimConfig::default().aux_capacity)]
    aux_capacity: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write `results.tar` next to the exported results.
    #[arg(long)]
    archive: bool,
    /// Label stored with the records; used as the column name in reports.
    #[arg(long, default_value = "procwasm")]
    system: String,
    /// Per-entry limit in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Subcommand)]
enum FixturesAction {
    List,
    /// Write every fixture to `<dir>/bin/<name>.wasm`.
    Install {
        dir: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    system: String,
    provider: ProviderKind,
    aux_capacity: usize,
    iterations: usize,
    records: Vec<RunRecord>,
}

/// Outcome that maps onto the process exit code.
enum Verdict {
    Ok,
    Failed,
}

fn run(args: RunArgs) -> Result<Verdict> {
    let text =
        fs::read_to_string(&args.cmdfile).with_context(|| format!("reading {}", args.cmdfile.display()))?;
    let cf = CommandFile::parse(&text)?;
    let mut image = FsImage::from_host_dir(&args.fsimage)?;
    fixtures::install(&mut image)?;
    let h = Harness::new(
        image,
        HarnessConfig {
            shim: ShimConfig::with_aux_capacity(args.aux_capacity),
            counters: counters::provider(args.counters),
            timeout: args.timeout.map(Duration::from_secs),
        },
    )?;
    let records = h.repeat_benchmark(&cf, args.iterations)?;
    fs::create_dir_all(&args.out)?;
    let results = args.out.join("results");
    h.export(RESULTS_ROOT, &results)?;
    h.shutdown()?;
    if args.archive {
        let tar = archive_results(&results)?;
        fs::write(args.out.join("results.tar"), tar)?;
    }

    let mut by_bench: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut failed = false;
    for r in &records {
        if r.succeeded() {
            by_bench.entry(&r.benchmark).or_default().push(r.wall_ms);
        } else {
            failed = true;
            eprintln!(
                "{} iteration {}: {:?} {}",
                r.benchmark,
                r.iteration,
                r.status,
                describe(&r.validation)
            );
        }
    }
    for (bench, walls) in &by_bench {
        let (mean, se) = stats::mean_stderr(walls)?;
        println!(
            "{bench}: {} ± {} ms over {} runs",
            stats::sig(mean, 6),
            stats::sig(se, 6),
            walls.len()
        );
    }
    let ok: Vec<RunRecord> = records.iter().filter(|r| r.succeeded()).cloned().collect();
    if let Ok(p) = overhead_percent(&ok) {
        println!("kernel overhead: {}%", stats::sig(p, 3));
    }
    let file = RunFile {
        system: args.system,
        provider: args.counters,
        aux_capacity: args.aux_capacity,
        iterations: args.iterations,
        records,
    };
    fs::write(args.out.join(RECORDS_FILE), serde_json::to_vec_pretty(&file)?)?;
    Ok(if failed { Verdict::Failed } else { Verdict::Ok })
}

fn describe(v: &harness::Validation) -> String {
    match v {
        harness::Validation::Checked(r) if !r.passed() => {
            let files: Vec<String> = r.failures().map(|(p, o)| format!("{p}: {o:?}")).collect();
            format!("(validation failed: {})", files.join(", "))
        }
        _ => String::new(),
    }
}

fn validate(expected: &Path, actual: &Path) -> Result<Verdict> {
    if !expected.is_dir() {
        bail!("{} is not a directory", expected.display());
    }
    let report = validate_outputs(expected, actual);
    for (path, outcome) in &report.files {
        match outcome {
            FileOutcome::Pass => println!("ok      {path}"),
            FileOutcome::Differ { offset } => println!("differ  {path} at byte {offset}"),
            FileOutcome::Missing => println!("missing {path}"),
            FileOutcome::Unreadable(e) => println!("error   {path}: {e}"),
        }
    }
    Ok(if report.passed() {
        Verdict::Ok
    } else {
        Verdict::Failed
    })
}

fn report(dirs: &[PathBuf], format: Format, baseline: Option<String>) -> Result<Verdict> {
    let mut systems: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    let mut first = None;
    for d in dirs {
        let path = d.join(RECORDS_FILE);
        let text = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: RunFile =
            serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
        first.get_or_insert_with(|| file.system.clone());
        systems.entry(file.system).or_default().extend(file.records);
    }
    let baseline = baseline.or(first).expect("at least one directory");
    let Some(base) = systems.remove(&baseline) else {
        bail!("no records for baseline system {baseline:?}");
    };
    let times = stats::times_from_records(&base, &systems);
    let mut rep = stats::build_slowdown_report(&baseline, &times)?;
    let native = stats::counters_from_records(&base);
    let cands: BTreeMap<String, _> = systems
        .iter()
        .map(|(s, rs)| (s.clone(), stats::counters_from_records(rs)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    if !native.is_empty() && !cands.is_empty() {
        match stats::build_counter_report(&native, &cands) {
            Ok(cr) => rep.counters = Some(cr),
            Err(stats::StatsError::NoOverlap) => {
                eprintln!("no counter events in common; counter table omitted")
            }
            Err(e) => return Err(e.into()),
        }
    }
    for (system, records) in std::iter::once((&baseline, &base)).chain(systems.iter()) {
        let ok: Vec<RunRecord> = records.iter().filter(|r| r.succeeded()).cloned().collect();
        if let Ok(p) = overhead_percent(&ok) {
            rep.overhead.insert(system.clone(), p);
        }
    }
    match format {
        Format::Md => print!("{}", stats::to_markdown(&rep)),
        Format::Csv => print!("{}", stats::to_csv(&rep)),
    }
    Ok(Verdict::Ok)
}

fn fixtures_cmd(action: FixturesAction) -> Result<Verdict> {
    match action {
        FixturesAction::List => {
            for f in fixtures::ALL {
                println!("{}  {}  {}", fixtures::guest_path(f.name), f.sha256, f.usage);
            }
        }
        FixturesAction::Install { dir } => {
            let bin = dir.join("bin");
            fs::create_dir_all(&bin)?;
            for f in fixtures::ALL {
                fs::write(bin.join(format!("{}.wasm", f.name)), f.wasm)?;
            }
        }
    }
    Ok(Verdict::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { expected, actual } => validate(&expected, &actual),
        Command::Report {
            dirs,
            format,
            baseline,
        } => report(&dirs, format, baseline),
        Command::Fixtures { action } => fixtures_cmd(action),
    };
    match result {
        Ok(Verdict::Ok) => ExitCode::SUCCESS,
        Ok(Verdict::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
