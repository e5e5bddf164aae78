//! Auxiliary-buffer syscall transport.
//!
//! Every process owns one [`AuxBuffer`] that it shares with the kernel and
//! nothing else. The first 4 KiB page is the header; the rest is the data
//! region that carries copied-in arguments and copied-out results. The
//! status word at offset 0 drives a three-state machine:
//!
//! ```text
//!   IDLE --(shim: encode_request)--> REQUEST --(kernel: encode_response)--> DONE
//!    ^                                                                        |
//!    +------------------------(shim: post_and_wait returns)-------------------+
//! ```
//!
//! The shim only touches the buffer while the status is `IDLE` (and `DONE`,
//! to read the response); the kernel only while it is `REQUEST`. The status
//! is always the last field written.
//!
//! Header layout (little-endian), see `docs/abi.md`:
//!
//! | offset | size  | field                                    |
//! |--------|-------|------------------------------------------|
//! | 0      | 4     | status                                   |
//! | 4      | 4     | syscall number                           |
//! | 8      | 4     | argument count (0..=8)                   |
//! | 12     | 4     | errno (responses)                        |
//! | 16     | 8     | return value (responses)                 |
//! | 32     | 64    | eight 64-bit argument slots              |
//! | 96     | 4     | payload descriptor count                 |
//! | 100    | 8 × n | descriptors: (offset: u32, length: u32)  |

use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard, OnceLock};
use std::time::Duration;

use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const HEADER_SIZE: usize = PAGE_SIZE;
pub const MIN_CAPACITY: usize = 2 * PAGE_SIZE;
/// 64 MiB, the per-process buffer size used by default.
pub const DEFAULT_CAPACITY: usize = 64 << 20;
pub const MAX_ARGS: usize = 8;

const STATUS_OFF: usize = 0;
const SYSCALL_NO_OFF: usize = 4;
const ARG_COUNT_OFF: usize = 8;
const ERRNO_OFF: usize = 12;
const RETURN_OFF: usize = 16;
const ARGS_OFF: usize = 32;
const DESC_COUNT_OFF: usize = 96;
const DESC_OFF: usize = 100;

/// Number of payload descriptors that fit in the header page.
pub const MAX_PAYLOADS: usize = (HEADER_SIZE - DESC_OFF) / 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Status {
    Idle = 0,
    Request = 1,
    Done = 2,
}

impl Status {
    fn from_word(word: u32) -> Status {
        match word {
            0 => Status::Idle,
            1 => Status::Request,
            2 => Status::Done,
            // Only this module stores the word, always from a `Status`.
            other => unreachable!("corrupt status word {other}"),
        }
    }
}

/// A region of the data area holding one copied buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Payload {
    pub offset: u32,
    pub len: u32,
}

impl Payload {
    pub fn new(offset: u32, len: u32) -> Self {
        Payload { offset, len }
    }

    fn end(&self) -> u64 {
        self.offset as u64 + self.len as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SyscallRequest {
    pub syscall_no: u32,
    pub args: Vec<i64>,
    pub payloads: Vec<Payload>,
}

impl SyscallRequest {
    pub fn new(syscall_no: u32, args: Vec<i64>, payloads: Vec<Payload>) -> Self {
        SyscallRequest {
            syscall_no,
            args,
            payloads,
        }
    }

    /// Argument `i`, or 0 when the request carries fewer arguments.
    pub fn arg(&self, i: usize) -> i64 {
        self.args.get(i).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SyscallResponse {
    pub return_value: i64,
    pub errno: u32,
    pub out_payloads: Vec<Payload>,
}

impl SyscallResponse {
    pub fn ok(return_value: i64) -> Self {
        SyscallResponse {
            return_value,
            errno: 0,
            out_payloads: Vec::new(),
        }
    }

    pub fn with_payloads(return_value: i64, out_payloads: Vec<Payload>) -> Self {
        SyscallResponse {
            return_value,
            errno: 0,
            out_payloads,
        }
    }

    pub fn err(errno: u32) -> Self {
        SyscallResponse {
            return_value: -(errno as i64),
            errno,
            out_payloads: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("protocol state: expected {expected:?}, found {found:?}")]
    ProtocolState { expected: Status, found: Status },
    #[error("payloads need {requested} bytes but the data region holds {available}")]
    Overflow { requested: u64, available: u64 },
    #[error("payload at {offset}+{len} lies outside the data region or overlaps another")]
    BadPayload { offset: u32, len: u32 },
    #[error("{0} arguments exceed the 8 argument slots")]
    TooManyArgs(usize),
    #[error("{0} payload descriptors exceed the header capacity")]
    TooManyPayloads(usize),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("invalid auxiliary buffer capacity {0}")]
    InvalidCapacity(usize),
    #[error("kernel side of the auxiliary buffer is gone")]
    KernelGone,
}

/// Number of spin iterations before parking; zero on uniprocessors, where
/// spinning only delays the other party.
fn spin_budget() -> u32 {
    static BUDGET: OnceLock<u32> = OnceLock::new();
    *BUDGET.get_or_init(|| match std::thread::available_parallelism() {
        Ok(n) if n.get() > 1 => 2_000,
        _ => 0,
    })
}

/// The per-process shared region.
pub struct AuxBuffer {
    capacity: usize,
    status: AtomicU32,
    closed: AtomicBool,
    bytes: Mutex<Box<[u8]>>,
    park: Mutex<()>,
    wake: Condvar,
    trace: Option<Mutex<Vec<(Status, Status)>>>,
}

impl std::fmt::Debug for AuxBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuxBuffer")
            .field("capacity", &self.capacity)
            .field("status", &self.status())
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl AuxBuffer {
    /// Allocates a zeroed buffer. `capacity` must be at least 8 KiB, a
    /// multiple of 4 KiB, and small enough for 32-bit descriptor offsets.
    pub fn new(capacity: usize) -> Result<Self, TransportError> {
        Self::build(capacity, false)
    }

    /// Like [`AuxBuffer::new`], but records every status transition.
    pub fn with_trace(capacity: usize) -> Result<Self, TransportError> {
        Self::build(capacity, true)
    }

    fn build(capacity: usize, trace: bool) -> Result<Self, TransportError> {
        validate_capacity(capacity)?;
        Ok(AuxBuffer {
            capacity,
            status: AtomicU32::new(Status::Idle as u32),
            closed: AtomicBool::new(false),
            bytes: Mutex::new(vec![0u8; capacity].into_boxed_slice()),
            park: Mutex::new(()),
            wake: Condvar::new(),
            trace: trace.then(|| Mutex::new(Vec::new())),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn data_capacity(&self) -> usize {
        self.capacity - HEADER_SIZE
    }

    pub fn status(&self) -> Status {
        Status::from_word(self.status.load(Ordering::Acquire))
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    /// Marks the kernel side as gone and wakes any waiter.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify();
    }

    /// Recorded status transitions, if tracing was enabled.
    pub fn trace(&self) -> Option<Vec<(Status, Status)>> {
        self.trace.as_ref().map(|t| lock(t).clone())
    }

    /// Copy of the header page as currently laid out.
    pub fn header_snapshot(&self) -> Vec<u8> {
        lock(&self.bytes)[..HEADER_SIZE].to_vec()
    }

    /// Copies `data` into the data region at absolute offset `offset`.
    pub fn write_data(&self, offset: usize, data: &[u8]) -> Result<(), TransportError> {
        self.check_region(offset, data.len())?;
        lock(&self.bytes)[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Copies `out.len()` bytes from the data region at `offset` into `out`.
    pub fn read_data_into(&self, offset: usize, out: &mut [u8]) -> Result<(), TransportError> {
        self.check_region(offset, out.len())?;
        out.copy_from_slice(&lock(&self.bytes)[offset..offset + out.len()]);
        Ok(())
    }

    pub fn read_data(&self, offset: usize, len: usize) -> Result<Vec<u8>, TransportError> {
        let mut out = vec![0u8; len];
        self.read_data_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn read_payload(&self, p: Payload) -> Result<Vec<u8>, TransportError> {
        self.read_data(p.offset as usize, p.len as usize)
    }

    /// Runs `f` over the payload bytes without copying them out.
    pub fn with_payload<R>(&self, p: Payload, f: impl FnOnce(&[u8]) -> R) -> Result<R, TransportError> {
        let (off, len) = (p.offset as usize, p.len as usize);
        self.check_region(off, len)?;
        Ok(f(&lock(&self.bytes)[off..off + len]))
    }

    /// Runs `f` over a mutable view of a data-region slice.
    pub fn with_data_mut<R>(
        &self,
        offset: usize,
        len: usize,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R, TransportError> {
        self.check_region(offset, len)?;
        Ok(f(&mut lock(&self.bytes)[offset..offset + len]))
    }

    fn check_region(&self, offset: usize, len: usize) -> Result<(), TransportError> {
        let end = offset.checked_add(len);
        if offset < HEADER_SIZE || end.is_none_or(|e| e > self.capacity) {
            return Err(TransportError::BadPayload {
                offset: offset.min(u32::MAX as usize) as u32,
                len: len.min(u32::MAX as usize) as u32,
            });
        }
        Ok(())
    }

    fn expect(&self, expected: Status) -> Result<(), TransportError> {
        let found = self.status();
        if found != expected {
            return Err(TransportError::ProtocolState { expected, found });
        }
        Ok(())
    }

    /// Publishes `to`. The status bytes in the header are updated under the
    /// same lock that guarded the field writes, then the atomic word is
    /// swapped with release ordering.
    fn transition(
        &self,
        bytes: &mut MutexGuard<'_, Box<[u8]>>,
        from: Status,
        to: Status,
    ) -> Result<(), TransportError> {
        put_u32(bytes, STATUS_OFF, to as u32);
        self.status
            .compare_exchange(from as u32, to as u32, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|found| {
                put_u32(bytes, STATUS_OFF, found);
                TransportError::ProtocolState {
                    expected: from,
                    found: Status::from_word(found),
                }
            })?;
        if let Some(trace) = &self.trace {
            lock(trace).push((from, to));
        }
        Ok(())
    }

    fn notify(&self) {
        drop(lock(&self.park));
        self.wake.notify_all();
    }

    /// Blocks until the status equals `target`. Fails with `KernelGone` once
    /// the buffer is closed.
    pub fn wait_for(&self, target: Status) -> Result<(), TransportError> {
        for _ in 0..spin_budget() {
            if self.status() == target {
                return Ok(());
            }
            if self.is_closed() {
                return Err(TransportError::KernelGone);
            }
            std::hint::spin_loop();
        }
        let mut guard = lock(&self.park);
        loop {
            if self.status() == target {
                return Ok(());
            }
            if self.is_closed() {
                return Err(TransportError::KernelGone);
            }
            guard = self
                .wake
                .wait(guard)
                .unwrap_or_else(|poisoned| poisoned.into_inner());
        }
    }

    /// Like [`AuxBuffer::wait_for`] with an upper bound; `Ok(false)` on timeout.
    pub fn wait_for_timeout(&self, target: Status, timeout: Duration) -> Result<bool, TransportError> {
        let deadline = std::time::Instant::now() + timeout;
        let mut guard = lock(&self.park);
        loop {
            if self.status() == target {
                return Ok(true);
            }
            if self.is_closed() {
                return Err(TransportError::KernelGone);
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return Ok(false);
            }
            guard = self
                .wake
                .wait_timeout(guard, deadline - now)
                .unwrap_or_else(|poisoned| poisoned.into_inner())
                .0;
        }
    }

    /// Shim side: returns the buffer from `DONE` to `IDLE` after the
    /// response has been consumed.
    pub fn acknowledge(&self) -> Result<(), TransportError> {
        let mut bytes = lock(&self.bytes);
        self.transition(&mut bytes, Status::Done, Status::Idle)
    }
}

fn validate_capacity(capacity: usize) -> Result<(), TransportError> {
    let max = (u32::MAX as usize + 1) - PAGE_SIZE;
    if capacity < MIN_CAPACITY || !capacity.is_multiple_of(PAGE_SIZE) || capacity > max {
        return Err(TransportError::InvalidCapacity(capacity));
    }
    Ok(())
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_i64(b: &mut [u8], off: usize, v: i64) {
    b[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4-byte field"))
}

fn get_i64(b: &[u8], off: usize) -> i64 {
    i64::from_le_bytes(b[off..off + 8].try_into().expect("8-byte field"))
}

/// Checks that payload regions lie in the data region, do not overlap, and
/// together fit in the data capacity.
fn validate_payloads(aux: &AuxBuffer, payloads: &[Payload]) -> Result<(), TransportError> {
    if payloads.len() > MAX_PAYLOADS {
        return Err(TransportError::TooManyPayloads(payloads.len()));
    }
    let total: u64 = payloads.iter().map(|p| p.len as u64).sum();
    if total > aux.data_capacity() as u64 {
        return Err(TransportError::Overflow {
            requested: total,
            available: aux.data_capacity() as u64,
        });
    }
    for p in payloads {
        if (p.offset as usize) < HEADER_SIZE || p.end() > aux.capacity as u64 {
            return Err(TransportError::BadPayload {
                offset: p.offset,
                len: p.len,
            });
        }
    }
    let mut sorted: Vec<&Payload> = payloads.iter().filter(|p| p.len > 0).collect();
    sorted.sort_by_key(|p| p.offset);
    for pair in sorted.windows(2) {
        if pair[0].end() > pair[1].offset as u64 {
            return Err(TransportError::BadPayload {
                offset: pair[1].offset,
                len: pair[1].len,
            });
        }
    }
    Ok(())
}

fn write_descriptors(b: &mut [u8], payloads: &[Payload]) {
    put_u32(b, DESC_COUNT_OFF, payloads.len() as u32);
    for (i, p) in payloads.iter().enumerate() {
        put_u32(b, DESC_OFF + 8 * i, p.offset);
        put_u32(b, DESC_OFF + 8 * i + 4, p.len);
    }
}

fn read_descriptors(b: &[u8]) -> Result<Vec<Payload>, TransportError> {
    let count = get_u32(b, DESC_COUNT_OFF) as usize;
    if count > MAX_PAYLOADS {
        return Err(TransportError::TooManyPayloads(count));
    }
    Ok((0..count)
        .map(|i| Payload {
            offset: get_u32(b, DESC_OFF + 8 * i),
            len: get_u32(b, DESC_OFF + 8 * i + 4),
        })
        .collect())
}

/// Writes `req` into the header. The status moves `IDLE -> REQUEST` last.
pub fn encode_request(aux: &AuxBuffer, req: &SyscallRequest) -> Result<(), TransportError> {
    aux.expect(Status::Idle)?;
    if req.args.len() > MAX_ARGS {
        return Err(TransportError::TooManyArgs(req.args.len()));
    }
    validate_payloads(aux, &req.payloads)?;
    {
        let mut b = lock(&aux.bytes);
        put_u32(&mut b, SYSCALL_NO_OFF, req.syscall_no);
        put_u32(&mut b, ARG_COUNT_OFF, req.args.len() as u32);
        put_u32(&mut b, ERRNO_OFF, 0);
        put_i64(&mut b, RETURN_OFF, 0);
        for slot in 0..MAX_ARGS {
            put_i64(
                &mut b,
                ARGS_OFF + 8 * slot,
                req.args.get(slot).copied().unwrap_or(0),
            );
        }
        write_descriptors(&mut b, &req.payloads);
        aux.transition(&mut b, Status::Idle, Status::Request)?;
    }
    aux.notify();
    Ok(())
}

pub fn decode_request(aux: &AuxBuffer) -> Result<SyscallRequest, TransportError> {
    aux.expect(Status::Request)?;
    let req = {
        let b = lock(&aux.bytes);
        let arg_count = get_u32(&b, ARG_COUNT_OFF) as usize;
        if arg_count > MAX_ARGS {
            return Err(TransportError::TooManyArgs(arg_count));
        }
        SyscallRequest {
            syscall_no: get_u32(&b, SYSCALL_NO_OFF),
            args: (0..arg_count).map(|i| get_i64(&b, ARGS_OFF + 8 * i)).collect(),
            payloads: read_descriptors(&b)?,
        }
    };
    validate_payloads(aux, &req.payloads)?;
    Ok(req)
}

/// Writes `resp` into the header. The status moves `REQUEST -> DONE` last
/// and the waiting shim is woken.
pub fn encode_response(aux: &AuxBuffer, resp: &SyscallResponse) -> Result<(), TransportError> {
    aux.expect(Status::Request)?;
    if resp.errno != 0 && resp.return_value >= 0 {
        return Err(TransportError::Malformed(
            "nonzero errno with a non-negative return value",
        ));
    }
    validate_payloads(aux, &resp.out_payloads)?;
    {
        let mut b = lock(&aux.bytes);
        put_u32(&mut b, ERRNO_OFF, resp.errno);
        put_i64(&mut b, RETURN_OFF, resp.return_value);
        write_descriptors(&mut b, &resp.out_payloads);
        aux.transition(&mut b, Status::Request, Status::Done)?;
    }
    aux.notify();
    Ok(())
}

pub fn decode_response(aux: &AuxBuffer) -> Result<SyscallResponse, TransportError> {
    aux.expect(Status::Done)?;
    let resp = {
        let b = lock(&aux.bytes);
        SyscallResponse {
            return_value: get_i64(&b, RETURN_OFF),
            errno: get_u32(&b, ERRNO_OFF),
            out_payloads: read_descriptors(&b)?,
        }
    };
    if resp.errno != 0 && resp.return_value >= 0 {
        return Err(TransportError::Malformed(
            "nonzero errno with a non-negative return value",
        ));
    }
    validate_payloads(aux, &resp.out_payloads)?;
    Ok(resp)
}

/// Shim side of one syscall: publishes `req`, rings the kernel with
/// `doorbell`, blocks until the response is posted, and leaves the buffer
/// `IDLE` again.
pub fn post_and_wait(
    aux: &AuxBuffer,
    req: &SyscallRequest,
    doorbell: impl FnOnce() -> Result<(), TransportError>,
) -> Result<SyscallResponse, TransportError> {
    if aux.is_closed() {
        return Err(TransportError::KernelGone);
    }
    encode_request(aux, req)?;
    doorbell()?;
    aux.wait_for(Status::Done)?;
    let resp = decode_response(aux)?;
    aux.acknowledge()?;
    Ok(resp)
}

/// Lengths of the successive transfers a large read or write is split
/// into. Every chunk but the last equals the data capacity.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkPlan {
    chunks: Vec<u64>,
}

impl ChunkPlan {
    pub fn chunks(&self) -> &[u64] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.chunks.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.chunks.iter().copied()
    }
}

/// Splits `total` bytes into chunks of at most `data_capacity`.
///
/// Panics if `data_capacity` is zero.
pub fn plan_chunks(total: u64, data_capacity: u64) -> ChunkPlan {
    assert!(data_capacity > 0, "chunk capacity must be positive");
    let full = total / data_capacity;
    let rest = total % data_capacity;
    let mut chunks = vec![data_capacity; full as usize];
    if rest > 0 {
        chunks.push(rest);
    }
    ChunkPlan { chunks }
}

/// Sequential payload placement within the data region.
#[derive(Debug)]
pub struct PayloadLayout {
    next: usize,
    capacity: usize,
}

impl PayloadLayout {
    pub fn new(aux: &AuxBuffer) -> Self {
        PayloadLayout {
            next: HEADER_SIZE,
            capacity: aux.capacity(),
        }
    }

    /// Reserves `len` bytes, failing with `Overflow` once the region is full.
    pub fn reserve(&mut self, len: usize) -> Result<Payload, TransportError> {
        let end = self.next as u64 + len as u64;
        if end > self.capacity as u64 {
            return Err(TransportError::Overflow {
                requested: end - HEADER_SIZE as u64,
                available: (self.capacity - HEADER_SIZE) as u64,
            });
        }
        let p = Payload::new(self.next as u32, len as u32);
        self.next = end as usize;
        Ok(p)
    }

    pub fn used(&self) -> usize {
        self.next - HEADER_SIZE
    }
}
