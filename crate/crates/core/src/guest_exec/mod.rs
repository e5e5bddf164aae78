//! Loading and running WebAssembly guests.
//!
//! A guest imports exactly one host function, `kernel.syscall`, and exports
//! `_start` and `memory`. Everything it asks of the outside world goes
//! through that import; see [`crate::abi`] for the call numbers.
//!
//! Instantiation and execution are separate steps so callers can do setup
//! work (attach counters, register with the kernel) in between. The wall
//! clock for a run starts when `_start` is invoked, never earlier.

pub mod interp;
pub mod memory;
pub mod shim;

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::{AuxBuffer, TransportError, DEFAULT_CAPACITY};
pub use interp::{CompileError, ExecCounters, SyscallHandler, Trap};
pub use memory::{GuestMemory, OutOfBounds, WASM_PAGE_SIZE};
pub use shim::{Shim, ShimStats};

use interp::{CompiledModule, Machine};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuestError {
    #[error("invalid module: {0}")]
    InvalidModule(String),
    #[error("unsupported import {module}.{name}")]
    UnsupportedImport { module: String, name: String },
    #[error("invalid shim configuration: {0}")]
    Config(#[from] TransportError),
    #[error("instance is {0}, expected created")]
    NotRunnable(&'static str),
}

impl From<CompileError> for GuestError {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::UnsupportedImport { module, name } => {
                GuestError::UnsupportedImport { module, name }
            }
            CompileError::Invalid(m) => GuestError::InvalidModule(m),
            CompileError::Unsupported(m) => GuestError::InvalidModule(format!("unsupported {m}")),
        }
    }
}

/// A guest program's binary. Compilation happens on first use and is
/// shared by every instance created from the same module.
#[derive(Debug)]
pub struct GuestModule {
    bytes: Vec<u8>,
    compiled: OnceLock<Result<Arc<CompiledModule>, GuestError>>,
}

impl Clone for GuestModule {
    fn clone(&self) -> Self {
        GuestModule::new(self.bytes.clone())
    }
}

impl GuestModule {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        GuestModule {
            bytes: bytes.into(),
            compiled: OnceLock::new(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Validates the module and checks the import and export contract.
    pub fn validate(&self) -> Result<(), GuestError> {
        self.compiled().map(|_| ())
    }

    fn compiled(&self) -> Result<Arc<CompiledModule>, GuestError> {
        self.compiled
            .get_or_init(|| interp::compile(&self.bytes).map(Arc::new).map_err(Into::into))
            .clone()
    }
}

#[derive(Debug, Clone)]
pub struct ShimConfig {
    pub aux_capacity: usize,
    /// Test hook: sleep this long inside instantiation.
    pub instantiate_delay: Option<Duration>,
}

impl ShimConfig {
    /// The import namespace is fixed; exposed for documentation and checks.
    pub const ABI_NAMESPACE: &'static str = crate::abi::ABI_NAMESPACE;

    pub fn with_aux_capacity(aux_capacity: usize) -> Self {
        ShimConfig {
            aux_capacity,
            ..Default::default()
        }
    }
}

impl Default for ShimConfig {
    fn default() -> Self {
        ShimConfig {
            aux_capacity: DEFAULT_CAPACITY,
            instantiate_delay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuestState {
    Created,
    Running,
    Exited(i32),
    Trapped(String),
}

impl GuestState {
    fn name(&self) -> &'static str {
        match self {
            GuestState::Created => "created",
            GuestState::Running => "running",
            GuestState::Exited(_) => "exited",
            GuestState::Trapped(_) => "trapped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExitStatus {
    Exited(i32),
    Trapped(String),
}

impl ExitStatus {
    /// The code a waiting parent observes. Trapped guests report 134, as a
    /// Unix shell would for an aborted process.
    pub fn code(&self) -> i32 {
        match self {
            ExitStatus::Exited(c) => *c,
            ExitStatus::Trapped(_) => 134,
        }
    }

    pub fn success(&self) -> bool {
        *self == ExitStatus::Exited(0)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: ExitStatus,
    /// From invoking `_start` to the guest's exit.
    pub wall: Duration,
    /// Interpreter counts over the same window.
    pub counters: ExecCounters,
}

#[derive(Debug)]
pub struct GuestInstance {
    pid: u32,
    module: Arc<CompiledModule>,
    machine: Machine,
    state: GuestState,
    aux: Arc<AuxBuffer>,
}

/// Creates an instance: linear memory with data segments applied and a
/// zeroed auxiliary buffer. No guest code runs.
pub fn instantiate_guest(module: &GuestModule, cfg: &ShimConfig) -> Result<GuestInstance, GuestError> {
    let compiled = module.compiled()?;
    let aux = Arc::new(AuxBuffer::new(cfg.aux_capacity)?);
    if let Some(delay) = cfg.instantiate_delay {
        std::thread::sleep(delay);
    }
    Ok(GuestInstance {
        pid: 0,
        machine: Machine {
            memory: compiled.initial_memory(),
            globals: compiled.initial_globals(),
            counters: ExecCounters::default(),
        },
        module: compiled,
        state: GuestState::Created,
        aux,
    })
}

/// Runs `_start` to completion. Returning from `_start` counts as exit 0.
pub fn run_guest(
    instance: &mut GuestInstance,
    host: &mut dyn SyscallHandler,
) -> Result<RunOutcome, GuestError> {
    run_guest_with(instance, host, || {})
}

/// Like [`run_guest`], calling `before_entry` after all setup and
/// immediately before the clock starts and `_start` is invoked.
pub fn run_guest_with(
    instance: &mut GuestInstance,
    host: &mut dyn SyscallHandler,
    before_entry: impl FnOnce(),
) -> Result<RunOutcome, GuestError> {
    if instance.state != GuestState::Created {
        return Err(GuestError::NotRunnable(instance.state.name()));
    }
    instance.state = GuestState::Running;
    let start_counts = instance.machine.counters;
    before_entry();
    let started = Instant::now();
    let result = instance.machine.run_entry(&instance.module, host);
    let wall = started.elapsed();
    let counters = instance.machine.counters.delta(&start_counts);
    let status = match result {
        Ok(()) => ExitStatus::Exited(0),
        Err(Trap::Exit(code)) => ExitStatus::Exited(code),
        Err(trap) => ExitStatus::Trapped(trap.to_string()),
    };
    instance.state = match &status {
        ExitStatus::Exited(c) => GuestState::Exited(*c),
        ExitStatus::Trapped(r) => GuestState::Trapped(r.clone()),
    };
    Ok(RunOutcome {
        status,
        wall,
        counters,
    })
}

impl GuestInstance {
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn with_pid(mut self, pid: u32) -> Self {
        self.pid = pid;
        self
    }

    pub fn state(&self) -> &GuestState {
        &self.state
    }

    pub fn memory_size(&self) -> usize {
        self.machine.memory.size()
    }

    pub fn aux(&self) -> &Arc<AuxBuffer> {
        &self.aux
    }

    pub fn exec_counters(&self) -> ExecCounters {
        self.machine.counters
    }

    pub fn guest_read(&self, offset: u64, len: u64) -> Result<Vec<u8>, OutOfBounds> {
        self.machine.memory.read(offset, len).map(<[u8]>::to_vec)
    }

    pub fn guest_write(&mut self, offset: u64, data: &[u8]) -> Result<(), OutOfBounds> {
        self.machine.memory.write(offset, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_lifecycle() {
        let wasm = wat::parse_str(
            r#"(module
                (import "kernel" "syscall" (func (param i32 i64 i64 i64 i64 i64 i64) (result i64)))
                (memory (export "memory") 2)
                (func (export "_start")))"#,
        )
        .unwrap();
        let module = GuestModule::new(wasm);
        let mut inst = instantiate_guest(&module, &ShimConfig::with_aux_capacity(8192)).unwrap();
        assert_eq!(inst.state(), &GuestState::Created);
        assert_eq!(inst.memory_size(), 2 * WASM_PAGE_SIZE);
        assert_eq!(inst.aux().capacity(), 8192);

        struct Never;
        impl SyscallHandler for Never {
            fn syscall(&mut self, _: &mut GuestMemory, _: u32, _: [i64; 6]) -> Result<i64, Trap> {
                unreachable!()
            }
        }
        let out = run_guest(&mut inst, &mut Never).unwrap();
        assert_eq!(out.status, ExitStatus::Exited(0));
        assert_eq!(inst.state(), &GuestState::Exited(0));
        assert!(matches!(
            run_guest(&mut inst, &mut Never),
            Err(GuestError::NotRunnable("exited"))
        ));
    }

    #[test]
    fn rejects_bad_aux_capacity() {
        let wasm =
            wat::parse_str(r#"(module (memory (export "memory") 1) (func (export "_start")))"#).unwrap();
        let err = instantiate_guest(&GuestModule::new(wasm), &ShimConfig::with_aux_capacity(4096));
        assert!(matches!(err, Err(GuestError::Config(_))));
    }
}
