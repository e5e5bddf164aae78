//! Benchmark orchestration: command files run through the kernel, repeated
//! iterations, counter sessions, timing, overhead accounting, output
//! validation and archiving.

pub mod archive;
pub mod cmdfile;
pub mod counters;
pub mod validate;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::guest_exec::{ExitStatus, ShimConfig, ShimStats};
use crate::kernel::{FsError, FsImage, Kernel, StdioBinding};
use crate::runtime::{Runtime, RuntimeConfig, RuntimeError};

pub use archive::{archive_results, ArchiveError};
pub use cmdfile::{CommandEntry, CommandFile};
pub use counters::{CounterProvider, CounterSet, ProviderKind};
pub use validate::{validate_outputs, FileOutcome, ValidationReport};

/// Reference outputs live under this vfs directory, mirroring the paths
/// the programs write: `/expected/results/x` checks `/results/x`.
pub const EXPECTED_ROOT: &str = "/expected";
/// Vfs directory exported back to the host after a run.
pub const RESULTS_ROOT: &str = "/results";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("harness aborted: {0}")]
    Abort(String),
    #[error("command file: {0}")]
    CommandFile(#[from] cmdfile::ParseError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("total wall time is zero")]
    ZeroDuration,
    #[error("iteration count must be at least 1")]
    NoIterations,
    #[error("{program} did not finish within {timeout:?}")]
    Timeout { program: String, timeout: Duration },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

impl From<RuntimeError> for HarnessError {
    fn from(e: RuntimeError) -> Self {
        HarnessError::Abort(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Exited(i32),
    Trapped(String),
    /// The entry's program could not be started.
    SpawnFailure(String),
}

impl From<ExitStatus> for RunStatus {
    fn from(s: ExitStatus) -> Self {
        match s {
            ExitStatus::Exited(c) => RunStatus::Exited(c),
            ExitStatus::Trapped(r) => RunStatus::Trapped(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validation {
    /// No reference output exists for any file the entry touches.
    NotChecked,
    Checked(ValidationReport),
}

impl Validation {
    pub fn failed(&self) -> bool {
        matches!(self, Validation::Checked(r) if !r.passed())
    }
}

/// One execution of one command-file entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub benchmark: String,
    pub iteration: usize,
    /// From guest entry to exit; instantiation excluded.
    pub wall_ms: f64,
    /// Syscall handling attributed to the process, copies included.
    pub kernel_ms: f64,
    pub status: RunStatus,
    pub counters: CounterSet,
    pub validation: Validation,
    pub syscalls: ShimStats,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Exited(0) && !self.validation.failed()
    }
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub shim: ShimConfig,
    pub counters: Arc<dyn CounterProvider>,
    /// Per-entry limit; `None` waits forever.
    pub timeout: Option<Duration>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            shim: ShimConfig::default(),
            counters: Arc::new(counters::NullProvider),
            timeout: None,
        }
    }
}

/// Record names for the entries of `cf`: the program's file stem, with
/// `-2`, `-3`, ... appended to repeats.
pub fn benchmark_names(cf: &CommandFile) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    cf.entries
        .iter()
        .map(|e| {
            let file = e.program.rsplit('/').next().unwrap_or(&e.program);
            let stem = file.strip_suffix(".wasm").unwrap_or(file).to_string();
            let n = seen.entry(stem.clone()).or_default();
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}-{n}")
            }
        })
        .collect()
}

/// Vfs paths an entry may produce: its stdout and stderr plus every
/// absolute-path argument. Their parent directories are created before the
/// entry runs.
fn touched_paths(e: &CommandEntry) -> Vec<String> {
    let mut v = vec![e.stdout.clone(), e.stderr.clone()];
    v.extend(e.args.iter().filter(|a| a.starts_with('/')).cloned());
    v.sort();
    v.dedup();
    v
}

fn validate_in_vfs(kernel: &Kernel, paths: &[String]) -> Validation {
    let vfs = kernel.vfs();
    let mut report = ValidationReport::default();
    for p in paths {
        let expected_path = format!("{EXPECTED_ROOT}{p}");
        let Ok(expected) = vfs.read_file(&expected_path) else {
            continue;
        };
        let outcome = match vfs.read_file(p) {
            Ok(actual) => validate::compare_bytes(expected, actual),
            Err(_) => FileOutcome::Missing,
        };
        report.files.insert(p.clone(), outcome);
    }
    if report.files.is_empty() {
        Validation::NotChecked
    } else {
        Validation::Checked(report)
    }
}

fn parent(path: &str) -> Option<String> {
    let p = Path::new(path).parent()?.to_str()?;
    (p != "/" && !p.is_empty()).then(|| p.to_string())
}

/// Runs command files against one booted kernel.
pub struct Harness {
    image: FsImage,
    runtime: Runtime,
    timeout: Option<Duration>,
}

impl std::fmt::Debug for Harness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Harness").finish_non_exhaustive()
    }
}

impl Harness {
    pub fn new(image: FsImage, cfg: HarnessConfig) -> Result<Harness, HarnessError> {
        let kernel = Kernel::boot(&image)?;
        let runtime = Runtime::start(
            kernel,
            RuntimeConfig {
                shim: cfg.shim,
                counters: cfg.counters,
            },
        );
        Ok(Harness {
            image,
            runtime,
            timeout: cfg.timeout,
        })
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    /// Runs every entry once, in order, as iteration 0.
    pub fn run_command_file(&self, cf: &CommandFile) -> Result<Vec<RunRecord>, HarnessError> {
        self.run_iteration(cf, 0)
    }

    /// Runs the entries sequentially. A spawn failure is recorded and the
    /// next entry still runs; a dead kernel aborts.
    pub fn run_iteration(&self, cf: &CommandFile, iteration: usize) -> Result<Vec<RunRecord>, HarnessError> {
        let names = benchmark_names(cf);
        let mut records = Vec::with_capacity(cf.entries.len());
        for (entry, name) in cf.entries.iter().zip(names) {
            records.push(self.run_entry(entry, name, iteration)?);
        }
        Ok(records)
    }

    fn run_entry(
        &self,
        entry: &CommandEntry,
        benchmark: String,
        iteration: usize,
    ) -> Result<RunRecord, HarnessError> {
        let dirs: Vec<String> = touched_paths(entry).iter().filter_map(|p| parent(p)).collect();
        self.runtime.with_kernel(move |k| {
            for d in dirs {
                if let Err(e) = k.vfs_mut().mkdir_all(&d) {
                    log::warn!("creating {d}: {e}");
                }
            }
        })?;
        let stdio = [
            StdioBinding::Null,
            StdioBinding::write(&entry.stdout),
            StdioBinding::write(&entry.stderr),
        ];
        let record = |status, wall: Duration, kernel: Duration, counters, syscalls| RunRecord {
            benchmark: benchmark.clone(),
            iteration,
            wall_ms: wall.as_secs_f64() * 1e3,
            kernel_ms: kernel.as_secs_f64() * 1e3,
            status,
            counters,
            validation: Validation::NotChecked,
            syscalls,
        };
        let pid = match self.runtime.spawn(&entry.program, entry.argv(), stdio) {
            Ok(pid) => pid,
            Err(RuntimeError::Spawn(e)) => {
                log::warn!("{benchmark}: {e}");
                return Ok(record(
                    RunStatus::SpawnFailure(e.to_string()),
                    Duration::ZERO,
                    Duration::ZERO,
                    CounterSet::empty(ProviderKind::Null),
                    ShimStats::default(),
                ));
            }
            Err(e) => return Err(e.into()),
        };
        let report = match self.runtime.wait(pid, self.timeout) {
            Ok(r) => r,
            Err(RuntimeError::Timeout(_)) => {
                return Err(HarnessError::Timeout {
                    program: entry.program.clone(),
                    timeout: self.timeout.unwrap_or_default(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        self.runtime.clear_finished()?;
        let mut rec = record(
            report.status.into(),
            report.wall,
            report.kernel,
            report.counters,
            report.shim,
        );
        let paths = touched_paths(entry);
        rec.validation = self.runtime.with_kernel(move |k| validate_in_vfs(k, &paths))?;
        Ok(rec)
    }

    /// Restores the filesystem to the boot image: outputs are deleted and
    /// inputs re-mirrored.
    pub fn reset(&self) -> Result<(), HarnessError> {
        let image = self.image.clone();
        self.runtime.with_kernel(move |k| {
            let live = k.live_processes();
            if !live.is_empty() {
                return Err(HarnessError::Abort(format!(
                    "cannot reset the filesystem while processes {live:?} run"
                )));
            }
            k.reset_vfs(&image).map_err(HarnessError::from)
        })?
    }

    /// Runs the command file `n` times with a fresh filesystem and fresh
    /// processes each time.
    pub fn repeat_benchmark(&self, cf: &CommandFile, n: usize) -> Result<Vec<RunRecord>, HarnessError> {
        if n == 0 {
            return Err(HarnessError::NoIterations);
        }
        let mut all = Vec::new();
        for i in 0..n {
            self.reset()?;
            all.extend(self.run_iteration(cf, i)?);
        }
        Ok(all)
    }

    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, HarnessError> {
        let path = path.to_string();
        self.runtime
            .with_kernel(move |k| k.vfs().read_file(&path).map(<[u8]>::to_vec))?
            .map_err(HarnessError::from)
    }

    /// Copies the vfs tree at `dir` to `dest` on the host.
    pub fn export(&self, dir: &str, dest: &Path) -> Result<(), HarnessError> {
        let dir = dir.to_string();
        let dest = dest.to_path_buf();
        self.runtime
            .with_kernel(move |k| k.vfs().export(&dir, &dest))?
            .map_err(HarnessError::from)
    }

    pub fn shutdown(self) -> Result<Kernel, HarnessError> {
        Ok(self.runtime.shutdown()?)
    }
}

/// `100 * Σ kernel / Σ wall` over `records`.
pub fn overhead_percent(records: &[RunRecord]) -> Result<f64, HarnessError> {
    let wall: f64 = records.iter().map(|r| r.wall_ms).sum();
    let kernel: f64 = records.iter().map(|r| r.kernel_ms).sum();
    if wall <= 0.0 {
        return Err(HarnessError::ZeroDuration);
    }
    Ok(100.0 * kernel / wall)
}
