//! The per-process syscall shim.
//!
//! Translates the guest's `kernel.syscall` calls into auxiliary-buffer
//! requests: buffer arguments are copied out of linear memory into the data
//! region before the request is posted, and results are copied back after
//! the response arrives. The kernel never sees linear memory.
//!
//! Transfers larger than the data region are split with
//! [`plan_chunks`]. A chunked read stops at the first short chunk; every
//! chunk after the first is sent with [`flags::READ_NONBLOCK`] so a read
//! that already has data never blocks waiting for more. A chunked write
//! stops at the first short or failed chunk. No atomicity is promised
//! across chunks.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::interp::{SyscallHandler, Trap};
use super::memory::GuestMemory;
use crate::abi::{errno, flags, sys, StatRecord};
use crate::transport::{
    plan_chunks, post_and_wait, AuxBuffer, Payload, SyscallRequest, SyscallResponse, TransportError,
    HEADER_SIZE, MAX_PAYLOADS,
};

/// Rings the kernel after a request has been posted.
pub type Doorbell = Box<dyn Fn() -> Result<(), TransportError> + Send>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShimStats {
    /// Requests posted, keyed by syscall name.
    pub requests: BTreeMap<String, u64>,
    /// Read requests whose response carried at least one byte.
    pub data_reads: u64,
    /// Time spent inside syscalls, copies included.
    pub roundtrip: Duration,
    /// Bytes copied from linear memory into the auxiliary buffer.
    pub bytes_in: u64,
    /// Bytes copied from the auxiliary buffer into linear memory.
    pub bytes_out: u64,
}

impl ShimStats {
    pub fn requests_for(&self, no: u32) -> u64 {
        self.requests.get(&stat_key(no)).copied().unwrap_or(0)
    }

    pub fn total_requests(&self) -> u64 {
        self.requests.values().sum()
    }
}

fn stat_key(no: u32) -> String {
    match sys::name(no) {
        "unknown" => format!("sys_{no}"),
        name => name.to_string(),
    }
}

fn efault() -> i64 {
    -(errno::EFAULT as i64)
}

fn einval() -> i64 {
    -(errno::EINVAL as i64)
}

/// A guest pointer/length pair, rejected up front if it leaves linear memory.
fn span(mem: &GuestMemory, ptr: i64, len: i64) -> Option<(u64, u64)> {
    let ptr = u64::try_from(ptr).ok()?;
    let len = u64::try_from(len).ok()?;
    mem.check(ptr, len).ok()?;
    Some((ptr, len))
}

fn transport_trap(e: TransportError) -> Trap {
    match e {
        TransportError::KernelGone => Trap::KernelGone,
        other => Trap::Host(other.to_string()),
    }
}

pub struct Shim {
    aux: Arc<AuxBuffer>,
    doorbell: Doorbell,
    stats: ShimStats,
}

impl std::fmt::Debug for Shim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shim")
            .field("aux", &self.aux)
            .field("stats", &self.stats)
            .finish()
    }
}

impl Shim {
    pub fn new(aux: Arc<AuxBuffer>, doorbell: Doorbell) -> Self {
        Shim {
            aux,
            doorbell,
            stats: ShimStats::default(),
        }
    }

    pub fn stats(&self) -> &ShimStats {
        &self.stats
    }

    pub fn into_stats(self) -> ShimStats {
        self.stats
    }

    fn data_capacity(&self) -> u64 {
        self.aux.data_capacity() as u64
    }

    fn post(&mut self, req: SyscallRequest) -> Result<SyscallResponse, Trap> {
        *self.stats.requests.entry(stat_key(req.syscall_no)).or_default() += 1;
        let bell = &self.doorbell;
        post_and_wait(&self.aux, &req, bell).map_err(transport_trap)
    }

    /// Copies guest bytes into the data region at `at` (absolute offset).
    fn copy_in(&mut self, mem: &GuestMemory, ptr: u64, len: u64, at: usize) -> Result<Payload, Trap> {
        let src = mem.read(ptr, len).map_err(|e| Trap::Host(e.to_string()))?;
        self.aux.write_data(at, src).map_err(transport_trap)?;
        self.stats.bytes_in += len;
        Ok(Payload::new(at as u32, len as u32))
    }

    /// Copies at most `max` bytes of a response payload into guest memory.
    fn copy_out(&mut self, mem: &mut GuestMemory, p: Payload, dst: u64, max: u64) -> Result<u64, Trap> {
        let n = (p.len as u64).min(max);
        let part = Payload::new(p.offset, n as u32);
        self.aux
            .with_payload(part, |src| mem.write(dst, src))
            .map_err(transport_trap)?
            .map_err(|e| Trap::Host(e.to_string()))?;
        self.stats.bytes_out += n;
        Ok(n)
    }

    fn first_payload(resp: &SyscallResponse) -> Result<Payload, Trap> {
        resp.out_payloads
            .first()
            .copied()
            .ok_or_else(|| Trap::Host("kernel response is missing its payload".into()))
    }

    fn read(&mut self, mem: &mut GuestMemory, fd: i64, ptr: i64, len: i64) -> Result<i64, Trap> {
        let Some((ptr, len)) = span(mem, ptr, len) else {
            return Ok(efault());
        };
        let plan = plan_chunks(len, self.data_capacity());
        if plan.is_empty() {
            let resp = self.post(SyscallRequest::new(sys::READ, vec![fd, 0, 0], vec![]))?;
            return Ok(resp.return_value.min(0));
        }
        let mut done = 0u64;
        for (i, chunk) in plan.iter().enumerate() {
            let mode = if i == 0 { 0 } else { flags::READ_NONBLOCK };
            let resp = self.post(SyscallRequest::new(
                sys::READ,
                vec![fd, chunk as i64, mode],
                vec![],
            ))?;
            if resp.return_value < 0 {
                if done > 0 {
                    break;
                }
                return Ok(resp.return_value);
            }
            let n = resp.return_value as u64;
            if n > 0 {
                self.stats.data_reads += 1;
                let p = Self::first_payload(&resp)?;
                if p.len as u64 != n {
                    return Err(Trap::Host("read payload length mismatch".into()));
                }
                self.copy_out(mem, p, ptr + done, n)?;
            }
            done += n;
            if n < chunk {
                break;
            }
        }
        Ok(done as i64)
    }

    fn write(&mut self, mem: &GuestMemory, fd: i64, ptr: i64, len: i64) -> Result<i64, Trap> {
        let Some((ptr, len)) = span(mem, ptr, len) else {
            return Ok(efault());
        };
        let plan = plan_chunks(len, self.data_capacity());
        if plan.is_empty() {
            let resp = self.post(SyscallRequest::new(sys::WRITE, vec![fd, 0], vec![]))?;
            return Ok(resp.return_value.min(0));
        }
        let mut done = 0u64;
        for chunk in plan.iter() {
            let p = self.copy_in(mem, ptr + done, chunk, HEADER_SIZE)?;
            let resp = self.post(SyscallRequest::new(sys::WRITE, vec![fd, chunk as i64], vec![p]))?;
            if resp.return_value < 0 {
                if done > 0 {
                    break;
                }
                return Ok(resp.return_value);
            }
            let n = resp.return_value as u64;
            done += n;
            if n < chunk {
                break;
            }
        }
        Ok(done as i64)
    }

    fn writev(&mut self, mem: &GuestMemory, fd: i64, iov: i64, count: i64) -> Result<i64, Trap> {
        let Some((iov, count)) = (count >= 0)
            .then(|| span(mem, iov, count.saturating_mul(8)))
            .flatten()
            .map(|(p, l)| (p, l / 8))
        else {
            return Ok(efault());
        };
        let mut segments = Vec::with_capacity(count as usize);
        for i in 0..count {
            let base = iov + 8 * i;
            let (Ok(ptr), Ok(len)) = (mem.read_u32(base), mem.read_u32(base + 4)) else {
                return Ok(efault());
            };
            if mem.check(ptr as u64, len as u64).is_err() {
                return Ok(efault());
            }
            if len > 0 {
                segments.push((ptr as u64, len as u64));
            }
        }
        if segments.is_empty() {
            let resp = self.post(SyscallRequest::new(sys::WRITEV, vec![fd, 0], vec![]))?;
            return Ok(resp.return_value.min(0));
        }

        let cap = self.data_capacity();
        let mut seg = 0usize;
        let mut seg_done = 0u64;
        let mut done = 0u64;
        while seg < segments.len() {
            let mut payloads = Vec::new();
            let mut used = 0u64;
            while seg < segments.len() && used < cap && payloads.len() < MAX_PAYLOADS {
                let (ptr, len) = segments[seg];
                let take = (len - seg_done).min(cap - used);
                payloads.push(self.copy_in(mem, ptr + seg_done, take, HEADER_SIZE + used as usize)?);
                used += take;
                seg_done += take;
                if seg_done == len {
                    seg += 1;
                    seg_done = 0;
                }
            }
            let resp = self.post(SyscallRequest::new(sys::WRITEV, vec![fd, used as i64], payloads))?;
            if resp.return_value < 0 {
                if done > 0 {
                    break;
                }
                return Ok(resp.return_value);
            }
            let n = resp.return_value as u64;
            done += n;
            if n < used {
                break;
            }
        }
        Ok(done as i64)
    }

    /// Posts a request whose first payload is a path taken from guest memory.
    fn with_path(
        &mut self,
        mem: &GuestMemory,
        no: u32,
        path: (i64, i64),
        args: Vec<i64>,
    ) -> Result<Result<SyscallResponse, i64>, Trap> {
        let Some((ptr, len)) = span(mem, path.0, path.1) else {
            return Ok(Err(efault()));
        };
        if len > self.data_capacity() {
            return Ok(Err(einval()));
        }
        let p = self.copy_in(mem, ptr, len, HEADER_SIZE)?;
        self.post(SyscallRequest::new(no, args, vec![p])).map(Ok)
    }

    /// Posts a request and copies its first payload to `out`, which must hold `size` bytes.
    fn with_out(
        &mut self,
        mem: &mut GuestMemory,
        req: SyscallRequest,
        out: i64,
        size: u64,
    ) -> Result<i64, Trap> {
        let Some((out, _)) = span(mem, out, size as i64) else {
            return Ok(efault());
        };
        let resp = self.post(req)?;
        if resp.return_value >= 0 {
            let p = Self::first_payload(&resp)?;
            self.copy_out(mem, p, out, size)?;
        }
        Ok(resp.return_value)
    }

    fn dispatch(&mut self, mem: &mut GuestMemory, no: u32, a: [i64; 6]) -> Result<i64, Trap> {
        match no {
            sys::READ => self.read(mem, a[0], a[1], a[2]),
            sys::WRITE => self.write(mem, a[0], a[1], a[2]),
            sys::WRITEV => self.writev(mem, a[0], a[1], a[2]),
            sys::OPEN => Ok(match self.with_path(mem, no, (a[0], a[1]), vec![a[2]])? {
                Ok(resp) => resp.return_value,
                Err(e) => e,
            }),
            sys::STAT => {
                let size = StatRecord::SIZE as u64;
                let Some((out, _)) = span(mem, a[2], size as i64) else {
                    return Ok(efault());
                };
                match self.with_path(mem, no, (a[0], a[1]), vec![])? {
                    Ok(resp) if resp.return_value >= 0 => {
                        let p = Self::first_payload(&resp)?;
                        self.copy_out(mem, p, out, size)?;
                        Ok(resp.return_value)
                    }
                    Ok(resp) => Ok(resp.return_value),
                    Err(e) => Ok(e),
                }
            }
            sys::SPAWN => {
                let (Some((pp, pl)), Some((ap, al))) = (span(mem, a[0], a[1]), span(mem, a[2], a[3])) else {
                    return Ok(efault());
                };
                if pl + al > self.data_capacity() {
                    return Ok(einval());
                }
                let path = self.copy_in(mem, pp, pl, HEADER_SIZE)?;
                let argv = self.copy_in(mem, ap, al, HEADER_SIZE + pl as usize)?;
                let resp = self.post(SyscallRequest::new(no, vec![a[4]], vec![path, argv]))?;
                Ok(resp.return_value)
            }
            sys::PIPE => self.with_out(mem, SyscallRequest::new(no, vec![], vec![]), a[0], 8),
            sys::ARGS_SIZES_GET => self.with_out(mem, SyscallRequest::new(no, vec![], vec![]), a[0], 8),
            sys::ARGS_GET => {
                let Some((_, len)) = span(mem, a[0], a[1]) else {
                    return Ok(efault());
                };
                self.with_out(mem, SyscallRequest::new(no, vec![len as i64], vec![]), a[0], len)
            }
            sys::CLOSE | sys::WAITPID => Ok(self
                .post(SyscallRequest::new(no, vec![a[0]], vec![]))?
                .return_value),
            sys::LSEEK => Ok(self
                .post(SyscallRequest::new(no, vec![a[0], a[1], a[2]], vec![]))?
                .return_value),
            sys::EXIT => {
                self.post(SyscallRequest::new(no, vec![a[0]], vec![]))?;
                Err(Trap::Exit(a[0] as i32))
            }
            _ => Ok(self
                .post(SyscallRequest::new(no, a.to_vec(), vec![]))?
                .return_value),
        }
    }
}

impl SyscallHandler for Shim {
    fn syscall(&mut self, mem: &mut GuestMemory, no: u32, args: [i64; 6]) -> Result<i64, Trap> {
        let started = Instant::now();
        let r = self.dispatch(mem, no, args);
        self.stats.roundtrip += started.elapsed();
        r
    }
}
