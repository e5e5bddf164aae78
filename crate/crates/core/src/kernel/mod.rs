//! The in-memory Unix-like kernel.
//!
//! The kernel is a plain state machine. It never runs guest code and never
//! sees linear memory: every request arrives as a [`SyscallRequest`] in a
//! process's [`AuxBuffer`], and every result leaves through the same
//! buffer. Whoever owns the kernel (see [`crate::runtime`]) serializes all
//! calls into it, which makes it a single logical event loop.
//!
//! Blocking calls (reading an empty pipe, writing a full one, waiting for a
//! child) do not block anything: the request is parked with the condition it
//! waits on, and retried after every later event until it completes.

pub mod objects;
pub mod pipe;
pub mod vfs;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::abi::{self, errno, flags, sys, NodeKind};
use crate::guest_exec::{ExitStatus, GuestModule};
use crate::transport::{
    decode_request, encode_response, AuxBuffer, Payload, SyscallRequest, SyscallResponse, TransportError,
    HEADER_SIZE,
};
use objects::{Object, ObjectRef, ObjectTable, PipeId};
use pipe::Pipe;
pub use vfs::{FsError, FsImage, FsNode, ImageEntry, Vfs};

pub type Pid = u32;

/// Where a new process's descriptor 0, 1 or 2 points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StdioBinding {
    Null,
    /// Opened by the kernel with the given `open` flags.
    File {
        path: String,
        flags: i64,
    },
    /// A descriptor of the spawning process.
    Parent(u32),
}

impl StdioBinding {
    pub fn read(path: &str) -> Self {
        StdioBinding::File {
            path: path.to_string(),
            flags: flags::O_RDONLY,
        }
    }

    /// Truncating write, creating the file if needed.
    pub fn write(path: &str) -> Self {
        StdioBinding::File {
            path: path.to_string(),
            flags: flags::O_WRONLY | flags::O_CREAT | flags::O_TRUNC,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpawnError {
    #[error("program not found: {0}")]
    NotFound(String),
    #[error("invalid module {path}: {reason}")]
    InvalidModule { path: String, reason: String },
    #[error("cannot bind stdio: {0}")]
    BadStdio(String),
    #[error("no such process {0}")]
    NoSuchProcess(Pid),
}

impl SpawnError {
    fn errno(&self) -> u32 {
        match self {
            SpawnError::NotFound(_) => errno::ENOENT,
            SpawnError::BadStdio(_) => errno::EBADF,
            SpawnError::InvalidModule { .. } | SpawnError::NoSuchProcess(_) => errno::EINVAL,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("no such process {0}")]
    NoSuchProcess(Pid),
    #[error("process {0} has no auxiliary buffer attached")]
    NotAttached(Pid),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A process the runtime has to start.
#[derive(Debug, Clone)]
pub struct Launch {
    pub pid: Pid,
    pub module: Arc<GuestModule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dispatch {
    Complete(SyscallResponse),
    Parked,
}

/// What a parked request is waiting for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wake {
    PipeReadable(PipeId),
    PipeWritable(PipeId),
    ChildExit(Pid),
}

/// How many requests have parked, by what they waited for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParkCounts {
    pub pipe_reads: u64,
    pub pipe_writes: u64,
    pub child_waits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcState {
    /// Spawned; the guest has not attached its buffer yet.
    Starting,
    Running,
    Exited(ExitStatus),
}

#[derive(Debug)]
struct Process {
    parent: Option<Pid>,
    program: String,
    argv: Vec<String>,
    fds: BTreeMap<u32, ObjectRef>,
    aux: Option<Arc<AuxBuffer>>,
    state: ProcState,
    exit_code: Option<i32>,
    parked_time: Duration,
}

#[derive(Debug)]
struct ParkedCall {
    pid: Pid,
    req: SyscallRequest,
    wake: Wake,
    since: Instant,
    progress: u64,
}

enum Step {
    Done(SyscallResponse),
    Park(Wake),
}

fn fail(e: u32) -> Step {
    Step::Done(SyscallResponse::err(e))
}

fn ok(v: i64) -> Step {
    Step::Done(SyscallResponse::ok(v))
}

#[derive(Debug, Default)]
pub struct Kernel {
    vfs: Vfs,
    procs: BTreeMap<Pid, Process>,
    next_pid: Pid,
    objects: ObjectTable,
    pipes: HashMap<PipeId, Pipe>,
    next_pipe: PipeId,
    parked: Vec<ParkedCall>,
    park_counts: ParkCounts,
    launches: VecDeque<Launch>,
    modules: HashMap<String, Arc<GuestModule>>,
}

impl Kernel {
    pub fn boot(image: &FsImage) -> Result<Kernel, FsError> {
        Ok(Kernel {
            vfs: Vfs::from_image(image)?,
            next_pid: 1,
            ..Default::default()
        })
    }

    pub fn vfs(&self) -> &Vfs {
        &self.vfs
    }

    pub fn vfs_mut(&mut self) -> &mut Vfs {
        &mut self.vfs
    }

    /// Replaces the filesystem with a fresh copy of `image`. Only allowed
    /// while no process holds open objects.
    pub fn reset_vfs(&mut self, image: &FsImage) -> Result<(), FsError> {
        assert_eq!(self.objects.live(), 0, "filesystem reset with open descriptors");
        self.vfs = Vfs::from_image(image)?;
        self.modules.clear();
        Ok(())
    }

    fn load_module(&mut self, path: &str) -> Result<Arc<GuestModule>, SpawnError> {
        let not_found = || SpawnError::NotFound(path.to_string());
        if vfs::check_path(path).is_err() {
            return Err(not_found());
        }
        let bytes = self.vfs.read_file(path).map_err(|_| not_found())?;
        if let Some(m) = self.modules.get(path).filter(|m| m.bytes() == bytes) {
            return Ok(m.clone());
        }
        let module = Arc::new(GuestModule::new(bytes));
        module.validate().map_err(|e| SpawnError::InvalidModule {
            path: path.to_string(),
            reason: e.to_string(),
        })?;
        self.modules.insert(path.to_string(), module.clone());
        Ok(module)
    }

    fn bind_stdio(&mut self, parent: Option<Pid>, b: &StdioBinding) -> Result<ObjectRef, SpawnError> {
        match b {
            StdioBinding::Null => Ok(self.objects.insert(Object::Null)),
            StdioBinding::File { path, flags } => match self.open_object(path, *flags) {
                Ok(obj) => Ok(self.objects.insert(obj)),
                Err(e) => Err(SpawnError::BadStdio(format!("{path}: errno {e}"))),
            },
            StdioBinding::Parent(fd) => {
                let r = parent
                    .and_then(|p| self.procs.get(&p))
                    .and_then(|p| p.fds.get(fd).copied())
                    .filter(|r| self.objects.retain(*r))
                    .ok_or_else(|| SpawnError::BadStdio(format!("parent has no descriptor {fd}")))?;
                Ok(r)
            }
        }
    }

    /// Creates a process for `program` and queues it for launch. The guest
    /// starts running once the runtime picks up the [`Launch`].
    pub fn spawn(
        &mut self,
        parent: Option<Pid>,
        program: &str,
        argv: Vec<String>,
        stdio: [StdioBinding; 3],
    ) -> Result<Pid, SpawnError> {
        if let Some(p) = parent {
            if !self.procs.contains_key(&p) {
                return Err(SpawnError::NoSuchProcess(p));
            }
        }
        let module = self.load_module(program)?;
        let pid = self.create(parent, program, argv, stdio)?;
        self.launches.push_back(Launch { pid, module });
        Ok(pid)
    }

    /// Creates a process entry without a guest. Requests are fed to it by
    /// attaching a buffer and calling [`Kernel::service`] directly.
    pub fn create_process(
        &mut self,
        parent: Option<Pid>,
        argv: Vec<String>,
        stdio: [StdioBinding; 3],
    ) -> Result<Pid, SpawnError> {
        self.create(parent, "", argv, stdio)
    }

    fn create(
        &mut self,
        parent: Option<Pid>,
        program: &str,
        argv: Vec<String>,
        stdio: [StdioBinding; 3],
    ) -> Result<Pid, SpawnError> {
        let mut fds = BTreeMap::new();
        for (fd, b) in stdio.iter().enumerate() {
            match self.bind_stdio(parent, b) {
                Ok(r) => {
                    fds.insert(fd as u32, r);
                }
                Err(e) => {
                    for r in fds.into_values() {
                        self.release(r);
                    }
                    return Err(e);
                }
            }
        }
        let pid = self.next_pid;
        self.next_pid += 1;
        self.procs.insert(
            pid,
            Process {
                parent,
                program: program.to_string(),
                argv,
                fds,
                aux: None,
                state: ProcState::Starting,
                exit_code: None,
                parked_time: Duration::ZERO,
            },
        );
        Ok(pid)
    }

    pub fn take_launches(&mut self) -> Vec<Launch> {
        self.launches.drain(..).collect()
    }

    /// Binds the process's buffer; from now on it may post requests.
    pub fn attach(&mut self, pid: Pid, aux: Arc<AuxBuffer>) -> Result<(), KernelError> {
        let p = self.procs.get_mut(&pid).ok_or(KernelError::NoSuchProcess(pid))?;
        p.aux = Some(aux);
        p.state = ProcState::Running;
        Ok(())
    }

    /// The runtime could not start the process.
    pub fn launch_failed(&mut self, pid: Pid, reason: &str) {
        self.process_exited(pid, ExitStatus::Trapped(format!("launch failed: {reason}")));
    }

    /// Records a process's termination: its descriptors are closed, its
    /// buffer is dropped, and waiters are woken.
    pub fn process_exited(&mut self, pid: Pid, status: ExitStatus) {
        let Some(p) = self.procs.get_mut(&pid) else {
            return;
        };
        let status = match (p.exit_code, status) {
            (Some(code), ExitStatus::Exited(_)) => ExitStatus::Exited(code),
            (_, s) => s,
        };
        p.state = ProcState::Exited(status);
        p.aux = None;
        self.close_all(pid);
        self.parked.retain(|c| c.pid != pid);
        self.retry_parked();
    }

    fn close_all(&mut self, pid: Pid) {
        let fds = match self.procs.get_mut(&pid) {
            Some(p) => std::mem::take(&mut p.fds),
            None => return,
        };
        for r in fds.into_values() {
            self.release(r);
        }
    }

    pub fn state(&self, pid: Pid) -> Option<&ProcState> {
        self.procs.get(&pid).map(|p| &p.state)
    }

    pub fn exit_status(&self, pid: Pid) -> Option<&ExitStatus> {
        match self.state(pid)? {
            ProcState::Exited(s) => Some(s),
            _ => None,
        }
    }

    pub fn program(&self, pid: Pid) -> Option<&str> {
        self.procs.get(&pid).map(|p| p.program.as_str())
    }

    /// Total time this process's requests spent parked.
    pub fn parked_time(&self, pid: Pid) -> Duration {
        self.procs.get(&pid).map_or(Duration::ZERO, |p| p.parked_time)
    }

    /// Requests parked since boot. Retries of an already parked request
    /// are not counted again.
    pub fn park_counts(&self) -> ParkCounts {
        self.park_counts
    }

    pub fn parked(&self) -> Vec<(Pid, u32, Wake)> {
        self.parked
            .iter()
            .map(|c| (c.pid, c.req.syscall_no, c.wake))
            .collect()
    }

    /// Forgets an exited process.
    pub fn reap(&mut self, pid: Pid) -> Option<ExitStatus> {
        let status = self.exit_status(pid)?.clone();
        self.procs.remove(&pid);
        Some(status)
    }

    pub fn live_processes(&self) -> Vec<Pid> {
        self.procs
            .iter()
            .filter(|(_, p)| !matches!(p.state, ProcState::Exited(_)))
            .map(|(pid, _)| *pid)
            .collect()
    }

    /// Closes every attached buffer; shims blocked on them fail with
    /// `KernelGone`.
    pub fn shutdown(&mut self) {
        for p in self.procs.values() {
            if let Some(aux) = &p.aux {
                aux.close();
            }
        }
    }

    fn aux(&self, pid: Pid) -> Result<Arc<AuxBuffer>, KernelError> {
        self.procs
            .get(&pid)
            .ok_or(KernelError::NoSuchProcess(pid))?
            .aux
            .clone()
            .ok_or(KernelError::NotAttached(pid))
    }

    /// Handles the request waiting in `pid`'s buffer, posting the response
    /// unless the call parks.
    pub fn service(&mut self, pid: Pid) -> Result<(), KernelError> {
        let aux = self.aux(pid)?;
        let req = decode_request(&aux)?;
        if let Dispatch::Complete(resp) = self.dispatch(pid, &req)? {
            encode_response(&aux, &resp)?;
        }
        self.retry_parked();
        Ok(())
    }

    /// Routes a decoded request. Payloads are read from, and results
    /// written to, `pid`'s auxiliary buffer.
    pub fn dispatch(&mut self, pid: Pid, req: &SyscallRequest) -> Result<Dispatch, KernelError> {
        let aux = self.aux(pid)?;
        let mut progress = 0;
        Ok(match self.step(pid, &aux, req, &mut progress) {
            Step::Done(resp) => Dispatch::Complete(resp),
            Step::Park(wake) => {
                let c = &mut self.park_counts;
                match wake {
                    Wake::PipeReadable(_) => c.pipe_reads += 1,
                    Wake::PipeWritable(_) => c.pipe_writes += 1,
                    Wake::ChildExit(_) => c.child_waits += 1,
                }
                self.parked.push(ParkedCall {
                    pid,
                    req: req.clone(),
                    wake,
                    since: Instant::now(),
                    progress,
                });
                Dispatch::Parked
            }
        })
    }

    /// Retries parked calls until a full pass makes no progress.
    fn retry_parked(&mut self) {
        loop {
            let mut progressed = false;
            for mut call in std::mem::take(&mut self.parked) {
                let Ok(aux) = self.aux(call.pid) else {
                    continue;
                };
                let before = call.progress;
                match self.step(call.pid, &aux, &call.req, &mut call.progress) {
                    Step::Done(resp) => {
                        if let Some(p) = self.procs.get_mut(&call.pid) {
                            p.parked_time += call.since.elapsed();
                        }
                        if let Err(e) = encode_response(&aux, &resp) {
                            log::error!("pid {}: cannot post parked response: {e}", call.pid);
                        }
                        progressed = true;
                    }
                    Step::Park(wake) => {
                        progressed |= call.progress != before;
                        call.wake = wake;
                        self.parked.push(call);
                    }
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn fd(&self, pid: Pid, fd: i64) -> Option<ObjectRef> {
        let fd = u32::try_from(fd).ok()?;
        let r = *self.procs.get(&pid)?.fds.get(&fd)?;
        self.objects.get(r).map(|_| r)
    }

    fn install(&mut self, pid: Pid, obj: Object) -> i64 {
        let r = self.objects.insert(obj);
        let p = self.procs.get_mut(&pid).expect("caller is live");
        let fd = (0..).find(|n| !p.fds.contains_key(n)).expect("descriptor space");
        p.fds.insert(fd, r);
        fd as i64
    }

    fn release(&mut self, r: ObjectRef) {
        match self.objects.release(r) {
            Some(Object::PipeRead(id)) => self.drop_pipe_end(id, true),
            Some(Object::PipeWrite(id)) => self.drop_pipe_end(id, false),
            _ => {}
        }
    }

    fn drop_pipe_end(&mut self, id: PipeId, reader: bool) {
        let Some(pipe) = self.pipes.get_mut(&id) else {
            return;
        };
        if reader {
            pipe.readers -= 1;
        } else {
            pipe.writers -= 1;
        }
        if pipe.readers == 0 && pipe.writers == 0 {
            self.pipes.remove(&id);
        }
    }

    fn open_object(&mut self, path: &str, oflags: i64) -> Result<Object, u32> {
        if oflags & !flags::KNOWN != 0 || oflags & flags::O_ACCMODE == flags::O_ACCMODE {
            return Err(errno::EINVAL);
        }
        if vfs::check_path(path).is_err() {
            return Err(errno::ENOENT);
        }
        let acc = oflags & flags::O_ACCMODE;
        let readable = acc != flags::O_WRONLY;
        let writable = acc != flags::O_RDONLY;
        let node = match self.vfs.lookup(path) {
            Some(id) => id,
            None if oflags & flags::O_CREAT != 0 => self.vfs.create_file(path).map_err(|_| errno::ENOENT)?,
            None => return Err(errno::ENOENT),
        };
        if self.vfs.node(node).kind() == NodeKind::Directory && writable {
            return Err(errno::EINVAL);
        }
        if writable && oflags & flags::O_TRUNC != 0 {
            self.vfs.node_mut(node).truncate();
        }
        Ok(Object::File {
            node,
            pos: 0,
            readable,
            writable,
            append: oflags & flags::O_APPEND != 0,
        })
    }

    fn payload_bytes(aux: &AuxBuffer, p: Payload) -> Result<Vec<u8>, u32> {
        aux.read_payload(p).map_err(|_| errno::EFAULT)
    }

    fn path_arg(aux: &AuxBuffer, req: &SyscallRequest) -> Result<String, u32> {
        let p = *req.payloads.first().ok_or(errno::EFAULT)?;
        String::from_utf8(Self::payload_bytes(aux, p)?).map_err(|_| errno::EINVAL)
    }

    /// Result bytes always go to the start of the data region.
    fn respond_with(aux: &AuxBuffer, ret: i64, data: &[u8]) -> Step {
        if aux.write_data(HEADER_SIZE, data).is_err() {
            return fail(errno::EFAULT);
        }
        Step::Done(SyscallResponse::with_payloads(
            ret,
            vec![Payload::new(HEADER_SIZE as u32, data.len() as u32)],
        ))
    }

    fn step(&mut self, pid: Pid, aux: &AuxBuffer, req: &SyscallRequest, progress: &mut u64) -> Step {
        let a = |i| req.arg(i);
        match req.syscall_no {
            sys::READ => self.sys_read(pid, aux, a(0), a(1), a(2)),
            sys::WRITE | sys::WRITEV => self.sys_write(pid, aux, a(0), &req.payloads, progress),
            sys::OPEN => match Self::path_arg(aux, req) {
                Ok(path) => match self.open_object(&path, a(0)) {
                    Ok(obj) => ok(self.install(pid, obj)),
                    Err(e) => fail(e),
                },
                Err(e) => fail(e),
            },
            sys::CLOSE => match self.fd(pid, a(0)) {
                Some(r) => {
                    if let Some(p) = self.procs.get_mut(&pid) {
                        p.fds.remove(&(a(0) as u32));
                    }
                    self.release(r);
                    ok(0)
                }
                None => fail(errno::EBADF),
            },
            sys::STAT => match Self::path_arg(aux, req) {
                Ok(path) => match self.vfs.stat(&path) {
                    Ok(st) => Self::respond_with(aux, 0, &st.to_bytes()),
                    Err(_) => fail(errno::ENOENT),
                },
                Err(e) => fail(e),
            },
            sys::LSEEK => self.sys_lseek(pid, a(0), a(1), a(2)),
            sys::PIPE => {
                let id = self.next_pipe;
                self.next_pipe += 1;
                self.pipes.insert(id, Pipe::default());
                let rfd = self.install(pid, Object::PipeRead(id)) as i32;
                let wfd = self.install(pid, Object::PipeWrite(id)) as i32;
                let mut out = [0u8; 8];
                out[..4].copy_from_slice(&rfd.to_le_bytes());
                out[4..].copy_from_slice(&wfd.to_le_bytes());
                Self::respond_with(aux, 0, &out)
            }
            sys::SPAWN => self.sys_spawn(pid, aux, req),
            sys::EXIT => {
                if let Some(p) = self.procs.get_mut(&pid) {
                    p.exit_code = Some(a(0) as i32);
                }
                self.close_all(pid);
                ok(0)
            }
            sys::WAITPID => self.sys_waitpid(pid, a(0)),
            sys::ARGS_SIZES_GET => {
                let argv = &self.procs[&pid].argv;
                let blob = abi::join_argv(argv);
                let mut out = [0u8; 8];
                out[..4].copy_from_slice(&(argv.len() as u32).to_le_bytes());
                out[4..].copy_from_slice(&(blob.len() as u32).to_le_bytes());
                Self::respond_with(aux, 0, &out)
            }
            sys::ARGS_GET => {
                let blob = abi::join_argv(&self.procs[&pid].argv);
                if (a(0) as u64) < blob.len() as u64 || a(0) < 0 {
                    return fail(errno::EINVAL);
                }
                Self::respond_with(aux, blob.len() as i64, &blob)
            }
            _ => fail(errno::ENOSYS),
        }
    }

    fn sys_read(&mut self, pid: Pid, aux: &AuxBuffer, fd: i64, len: i64, mode: i64) -> Step {
        let Some(r) = self.fd(pid, fd) else {
            return fail(errno::EBADF);
        };
        if len < 0 {
            return fail(errno::EINVAL);
        }
        let len = (len as usize).min(aux.data_capacity());
        match *self.objects.get(r).expect("checked by fd()") {
            Object::File {
                node, pos, readable, ..
            } => {
                if !readable {
                    return fail(errno::EBADF);
                }
                let n = self.vfs.node(node);
                if n.kind() == NodeKind::Directory {
                    return fail(errno::EINVAL);
                }
                let data = n.read_at(pos as usize, len);
                let step = Self::respond_with(aux, data.len() as i64, data);
                let read = data.len() as u64;
                if let Some(Object::File { pos, .. }) = self.objects.get_mut(r) {
                    *pos += read;
                }
                step
            }
            Object::PipeRead(id) => {
                let pipe = self.pipes.get_mut(&id).expect("open pipe end");
                if pipe.is_empty() {
                    if pipe.writers == 0 || len == 0 {
                        return Self::respond_with(aux, 0, &[]);
                    }
                    if mode & flags::READ_NONBLOCK != 0 {
                        return fail(errno::EAGAIN);
                    }
                    return Step::Park(Wake::PipeReadable(id));
                }
                let n = len.min(pipe.len());
                match aux.with_data_mut(HEADER_SIZE, n, |dst| pipe.read_into(dst)) {
                    Ok(n) => Step::Done(SyscallResponse::with_payloads(
                        n as i64,
                        vec![Payload::new(HEADER_SIZE as u32, n as u32)],
                    )),
                    Err(_) => fail(errno::EFAULT),
                }
            }
            Object::Null => Self::respond_with(aux, 0, &[]),
            Object::PipeWrite(_) => fail(errno::EBADF),
        }
    }

    /// `write` and `writev`: the payloads, in order, are the bytes to write.
    /// `progress` carries bytes already accepted by a parked pipe write.
    fn sys_write(
        &mut self,
        pid: Pid,
        aux: &AuxBuffer,
        fd: i64,
        payloads: &[Payload],
        progress: &mut u64,
    ) -> Step {
        let Some(r) = self.fd(pid, fd) else {
            return fail(errno::EBADF);
        };
        let total: u64 = payloads.iter().map(|p| p.len as u64).sum();
        match *self.objects.get(r).expect("checked by fd()") {
            Object::File {
                node,
                pos,
                writable,
                append,
                ..
            } => {
                if !writable {
                    return fail(errno::EBADF);
                }
                let f = self.vfs.node_mut(node);
                let mut at = if append { f.size() } else { pos as usize };
                for p in payloads {
                    if aux.with_payload(*p, |d| f.write_at(at, d)).is_err() {
                        return fail(errno::EFAULT);
                    }
                    at += p.len as usize;
                }
                if let Some(Object::File { pos, .. }) = self.objects.get_mut(r) {
                    *pos = at as u64;
                }
                ok(total as i64)
            }
            Object::PipeWrite(id) => {
                let pipe = self.pipes.get_mut(&id).expect("open pipe end");
                if pipe.readers == 0 {
                    return if *progress > 0 {
                        ok(*progress as i64)
                    } else {
                        fail(errno::EPIPE)
                    };
                }
                let mut skip = *progress;
                for p in payloads {
                    if skip >= p.len as u64 {
                        skip -= p.len as u64;
                        continue;
                    }
                    let part = Payload::new(p.offset + skip as u32, p.len - skip as u32);
                    skip = 0;
                    match aux.with_payload(part, |d| pipe.write(d)) {
                        Ok(n) => {
                            *progress += n as u64;
                            if n < part.len as usize {
                                break;
                            }
                        }
                        Err(_) => return fail(errno::EFAULT),
                    }
                }
                if *progress == total {
                    ok(total as i64)
                } else {
                    Step::Park(Wake::PipeWritable(id))
                }
            }
            Object::Null => ok(total as i64),
            Object::PipeRead(_) => fail(errno::EBADF),
        }
    }

    fn sys_lseek(&mut self, pid: Pid, fd: i64, offset: i64, whence: i64) -> Step {
        let Some(r) = self.fd(pid, fd) else {
            return fail(errno::EBADF);
        };
        let Some(&Object::File { node, pos, .. }) = self.objects.get(r) else {
            return fail(errno::EINVAL);
        };
        let base = match whence {
            flags::SEEK_SET => 0,
            flags::SEEK_CUR => pos as i64,
            flags::SEEK_END => self.vfs.node(node).size() as i64,
            _ => return fail(errno::EINVAL),
        };
        let Some(new) = base.checked_add(offset).filter(|n| *n >= 0) else {
            return fail(errno::EINVAL);
        };
        if let Some(Object::File { pos, .. }) = self.objects.get_mut(r) {
            *pos = new as u64;
        }
        ok(new)
    }

    fn sys_spawn(&mut self, pid: Pid, aux: &AuxBuffer, req: &SyscallRequest) -> Step {
        let (Some(&path), Some(&argv)) = (req.payloads.first(), req.payloads.get(1)) else {
            return fail(errno::EFAULT);
        };
        let (path, argv) = match (Self::payload_bytes(aux, path), Self::payload_bytes(aux, argv)) {
            (Ok(p), Ok(a)) => (p, a),
            _ => return fail(errno::EFAULT),
        };
        let Ok(path) = String::from_utf8(path) else {
            return fail(errno::EINVAL);
        };
        let parent_fds = &self.procs[&pid].fds;
        let stdio = abi::unpack_stdio(req.arg(0));
        let mut bindings = [StdioBinding::Null, StdioBinding::Null, StdioBinding::Null];
        for (fd, (slot, b)) in stdio.iter().zip(bindings.iter_mut()).enumerate() {
            *b = match slot {
                Some(n) => StdioBinding::Parent(*n as u32),
                None if parent_fds.contains_key(&(fd as u32)) => StdioBinding::Parent(fd as u32),
                None => StdioBinding::Null,
            };
        }
        match self.spawn(Some(pid), &path, abi::split_argv(&argv), bindings) {
            Ok(child) => ok(child as i64),
            Err(e) => fail(e.errno()),
        }
    }

    fn sys_waitpid(&mut self, pid: Pid, child: i64) -> Step {
        let Ok(child) = Pid::try_from(child) else {
            return fail(errno::EINVAL);
        };
        match self.procs.get(&child) {
            Some(c) if c.parent == Some(pid) => match &c.state {
                ProcState::Exited(status) => {
                    let code = status.code();
                    self.procs.remove(&child);
                    ok(code as i64)
                }
                _ => Step::Park(Wake::ChildExit(child)),
            },
            _ => fail(errno::EINVAL),
        }
    }
}
