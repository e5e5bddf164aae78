//! Drives a [`Kernel`] with real guests.
//!
//! The kernel lives on one event-loop thread and handles everything in
//! arrival order: doorbells from shims, launch and exit notifications, and
//! closures submitted by the host. Each guest runs on a thread of its own
//! and talks to the loop only through its auxiliary buffer and doorbell.

use std::collections::HashMap;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::guest_exec::{
    instantiate_guest, run_guest_with, ExecCounters, ExitStatus, Shim, ShimConfig, ShimStats,
};
use crate::harness::counters::{CounterProvider, CounterSet, NullProvider};
use crate::kernel::{Kernel, Launch, Pid, SpawnError, StdioBinding};
use crate::transport::{AuxBuffer, TransportError};

/// Everything measured about one finished process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessReport {
    pub pid: Pid,
    pub program: String,
    pub status: ExitStatus,
    /// From entry invocation to exit; instantiation is excluded.
    pub wall: Duration,
    /// Time inside syscalls (copies included) minus time spent parked,
    /// clamped to `[0, wall]`.
    pub kernel: Duration,
    pub counters: CounterSet,
    pub exec: ExecCounters,
    pub shim: ShimStats,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("the kernel event loop has stopped")]
    KernelGone,
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error("timed out waiting for process {0}")]
    Timeout(Pid),
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub shim: ShimConfig,
    pub counters: Arc<dyn CounterProvider>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            shim: ShimConfig::default(),
            counters: Arc::new(NullProvider),
        }
    }
}

struct Finished {
    status: ExitStatus,
    wall: Duration,
    exec: ExecCounters,
    counters: CounterSet,
    shim: ShimStats,
}

type Job = Box<dyn FnOnce(&mut Loop) + Send>;

enum Event {
    Doorbell(Pid),
    Started(Pid, Arc<AuxBuffer>),
    LaunchFailed(Pid, String),
    Exited(Pid, Box<Finished>),
    Call(Job),
    Shutdown,
}

struct Loop {
    kernel: Kernel,
    cfg: RuntimeConfig,
    tx: Sender<Event>,
    reports: HashMap<Pid, ProcessReport>,
    waiters: HashMap<Pid, Vec<Sender<ProcessReport>>>,
    guests: Vec<JoinHandle<()>>,
}

impl Loop {
    fn run(mut self, rx: Receiver<Event>) -> Kernel {
        while let Ok(ev) = rx.recv() {
            match ev {
                Event::Doorbell(pid) => {
                    if let Err(e) = self.kernel.service(pid) {
                        log::error!("pid {pid}: {e}");
                    }
                }
                Event::Started(pid, aux) => {
                    if let Err(e) = self.kernel.attach(pid, aux.clone()) {
                        log::error!("attach: {e}");
                        aux.close();
                    }
                }
                Event::LaunchFailed(pid, reason) => {
                    self.kernel.launch_failed(pid, &reason);
                    let report = ProcessReport {
                        pid,
                        program: self.kernel.program(pid).unwrap_or_default().to_string(),
                        status: self
                            .kernel
                            .exit_status(pid)
                            .cloned()
                            .unwrap_or(ExitStatus::Trapped(format!("launch failed: {reason}"))),
                        wall: Duration::ZERO,
                        kernel: Duration::ZERO,
                        counters: CounterSet::empty(self.cfg.counters.kind()),
                        exec: ExecCounters::default(),
                        shim: ShimStats::default(),
                    };
                    self.finish(report);
                }
                Event::Exited(pid, f) => {
                    let parked = self.kernel.parked_time(pid);
                    self.kernel.process_exited(pid, f.status.clone());
                    let status = self.kernel.exit_status(pid).cloned().unwrap_or(f.status);
                    let kernel = f.shim.roundtrip.saturating_sub(parked).min(f.wall);
                    let report = ProcessReport {
                        pid,
                        program: self.kernel.program(pid).unwrap_or_default().to_string(),
                        status,
                        wall: f.wall,
                        kernel,
                        counters: f.counters,
                        exec: f.exec,
                        shim: f.shim,
                    };
                    self.finish(report);
                }
                Event::Call(job) => job(&mut self),
                Event::Shutdown => break,
            }
            self.launch_pending();
        }
        self.kernel.shutdown();
        // Guests blocked in a syscall see their buffer closed and stop at
        // once; a guest still computing is detached.
        for g in self.guests.drain(..) {
            if g.is_finished() {
                let _ = g.join();
            }
        }
        self.kernel
    }

    fn finish(&mut self, report: ProcessReport) {
        for w in self.waiters.remove(&report.pid).unwrap_or_default() {
            let _ = w.send(report.clone());
        }
        self.reports.insert(report.pid, report);
    }

    fn launch_pending(&mut self) {
        for launch in self.kernel.take_launches() {
            let tx = self.tx.clone();
            let shim = self.cfg.shim.clone();
            let provider = self.cfg.counters.clone();
            let pid = launch.pid;
            let spawned = std::thread::Builder::new()
                .name(format!("guest-{pid}"))
                .spawn(move || guest_main(launch, shim, provider, tx));
            match spawned {
                Ok(handle) => {
                    self.guests.retain(|g| !g.is_finished());
                    self.guests.push(handle);
                }
                Err(e) => {
                    self.kernel.launch_failed(pid, &e.to_string());
                }
            }
        }
    }
}

fn guest_main(launch: Launch, cfg: ShimConfig, provider: Arc<dyn CounterProvider>, tx: Sender<Event>) {
    let pid = launch.pid;
    let mut instance = match instantiate_guest(&launch.module, &cfg) {
        Ok(i) => i.with_pid(pid),
        Err(e) => {
            let _ = tx.send(Event::LaunchFailed(pid, e.to_string()));
            return;
        }
    };
    let aux = instance.aux().clone();
    if tx.send(Event::Started(pid, aux.clone())).is_err() {
        return;
    }
    let bell = tx.clone();
    let mut shim = Shim::new(
        aux,
        Box::new(move || {
            bell.send(Event::Doorbell(pid))
                .map_err(|_| TransportError::KernelGone)
        }),
    );
    let mut session = None;
    let outcome = run_guest_with(&mut instance, &mut shim, || session = Some(provider.begin()));
    let finished = match outcome {
        Ok(o) => Finished {
            counters: match session {
                Some(s) => s.end(&o.counters),
                None => CounterSet::empty(provider.kind()),
            },
            status: o.status,
            wall: o.wall,
            exec: o.counters,
            shim: shim.into_stats(),
        },
        Err(e) => Finished {
            status: ExitStatus::Trapped(e.to_string()),
            wall: Duration::ZERO,
            exec: ExecCounters::default(),
            counters: CounterSet::empty(provider.kind()),
            shim: shim.into_stats(),
        },
    };
    let _ = tx.send(Event::Exited(pid, Box::new(finished)));
}

/// Handle to a running event loop.
pub struct Runtime {
    tx: Sender<Event>,
    thread: Option<JoinHandle<Kernel>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn start(kernel: Kernel, cfg: RuntimeConfig) -> Runtime {
        let (tx, rx) = mpsc::channel();
        let state = Loop {
            kernel,
            cfg,
            tx: tx.clone(),
            reports: HashMap::new(),
            waiters: HashMap::new(),
            guests: Vec::new(),
        };
        let thread = std::thread::Builder::new()
            .name("kernel".into())
            .spawn(move || state.run(rx))
            .expect("spawn kernel thread");
        Runtime {
            tx,
            thread: Some(thread),
        }
    }

    fn call<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Loop) -> R + Send + 'static,
    ) -> Result<R, RuntimeError> {
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(Event::Call(Box::new(move |l| {
                let _ = reply.send(f(l));
            })))
            .map_err(|_| RuntimeError::KernelGone)?;
        rx.recv().map_err(|_| RuntimeError::KernelGone)
    }

    /// Runs `f` on the event loop with exclusive access to the kernel.
    pub fn with_kernel<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Kernel) -> R + Send + 'static,
    ) -> Result<R, RuntimeError> {
        self.call(move |l| f(&mut l.kernel))
    }

    /// Starts a top-level process. Stdio bindings name vfs paths since
    /// there is no parent.
    pub fn spawn(
        &self,
        program: &str,
        argv: Vec<String>,
        stdio: [StdioBinding; 3],
    ) -> Result<Pid, RuntimeError> {
        let program = program.to_string();
        self.call(move |l| l.kernel.spawn(None, &program, argv, stdio))?
            .map_err(RuntimeError::from)
    }

    /// Blocks until `pid` has finished and returns its report. The process
    /// is removed from the kernel's table.
    pub fn wait(&self, pid: Pid, timeout: Option<Duration>) -> Result<ProcessReport, RuntimeError> {
        let (tx, rx) = mpsc::channel();
        self.call(move |l| match l.reports.get(&pid) {
            Some(r) => {
                let _ = tx.send(r.clone());
            }
            None => l.waiters.entry(pid).or_default().push(tx),
        })?;
        let report = match timeout {
            Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => RuntimeError::Timeout(pid),
                mpsc::RecvTimeoutError::Disconnected => RuntimeError::KernelGone,
            })?,
            None => rx.recv().map_err(|_| RuntimeError::KernelGone)?,
        };
        self.call(move |l| {
            l.reports.remove(&pid);
            l.kernel.reap(pid);
        })?;
        Ok(report)
    }

    /// Reports of every finished process not yet waited for, including
    /// children reaped by their parents.
    pub fn finished(&self) -> Result<Vec<ProcessReport>, RuntimeError> {
        self.call(|l| {
            let mut v: Vec<_> = l.reports.values().cloned().collect();
            v.sort_by_key(|r| r.pid);
            v
        })
    }

    /// Drops stored reports of processes nobody waited for.
    pub fn clear_finished(&self) -> Result<(), RuntimeError> {
        self.call(|l| l.reports.clear())
    }

    /// Stops the loop and hands back the kernel. Guests still attached see
    /// their buffers closed.
    pub fn shutdown(mut self) -> Result<Kernel, RuntimeError> {
        let _ = self.tx.send(Event::Shutdown);
        self.thread
            .take()
            .expect("running")
            .join()
            .map_err(|_| RuntimeError::KernelGone)
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.tx.send(Event::Shutdown);
            let _ = t.join();
        }
    }
}
