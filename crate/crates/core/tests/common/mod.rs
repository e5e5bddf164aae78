//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use procwasm::abi::sys;
use procwasm::kernel::{Kernel, ParkCounts, Pid, StdioBinding};
use procwasm::transport::{
    decode_response, encode_request, AuxBuffer, PayloadLayout, Status, SyscallRequest,
};
use rand::{Rng, SeedableRng};

pub fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut v = vec![0u8; n];
    rng.fill(&mut v[..]);
    v
}

/// A process with no guest: the test writes requests into its buffer the
/// way a shim would and services them on the kernel directly.
pub struct Synthetic {
    pub pid: Pid,
    pub aux: Arc<AuxBuffer>,
}

impl Synthetic {
    pub fn new(k: &mut Kernel, parent: Option<Pid>, stdio: [StdioBinding; 3], capacity: usize) -> Self {
        let pid = k.create_process(parent, vec!["synthetic".into()], stdio).unwrap();
        let aux = Arc::new(AuxBuffer::new(capacity).unwrap());
        k.attach(pid, aux.clone()).unwrap();
        Synthetic { pid, aux }
    }

    pub fn post(&self, k: &mut Kernel, no: u32, args: Vec<i64>, payloads: &[&[u8]]) {
        let mut layout = PayloadLayout::new(&self.aux);
        let descs = payloads
            .iter()
            .map(|d| {
                let p = layout.reserve(d.len()).unwrap();
                self.aux.write_data(p.offset as usize, d).unwrap();
                p
            })
            .collect();
        encode_request(&self.aux, &SyscallRequest::new(no, args, descs)).unwrap();
        k.service(self.pid).unwrap();
    }

    pub fn done(&self) -> bool {
        self.aux.status() == Status::Done
    }

    pub fn take(&self) -> (i64, Vec<u8>) {
        assert!(self.done(), "no response posted");
        let resp = decode_response(&self.aux).unwrap();
        let data = resp
            .out_payloads
            .first()
            .map(|p| self.aux.read_payload(*p).unwrap())
            .unwrap_or_default();
        self.aux.acknowledge().unwrap();
        (resp.return_value, data)
    }

    pub fn call(&self, k: &mut Kernel, no: u32, args: Vec<i64>, payloads: &[&[u8]]) -> (i64, Vec<u8>) {
        self.post(k, no, args, payloads);
        self.take()
    }
}

pub struct Transfer {
    pub received: Vec<u8>,
    pub parks: ParkCounts,
}

/// Moves `data` from one synthetic process to another through `sys_pipe`,
/// with random chunk sizes and a random order of reader and writer steps.
/// The first steps are fixed so both a parked read (reader first, on an
/// empty pipe) and a parked write (a write larger than the pipe) happen.
pub fn scripted_pipe_transfer(data: &[u8], seed: u64, max_chunk: usize) -> Transfer {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let capacity = (max_chunk + 4096).next_multiple_of(4096).max(8192);
    let mut k = Kernel::boot(&Default::default()).unwrap();
    let null = || StdioBinding::Null;
    let writer = Synthetic::new(&mut k, None, [null(), null(), null()], capacity);
    let (r, fds) = writer.call(&mut k, sys::PIPE, vec![], &[]);
    assert_eq!(r, 0);
    let rfd = i32::from_le_bytes(fds[..4].try_into().unwrap());
    let wfd = i32::from_le_bytes(fds[4..].try_into().unwrap()) as i64;
    let reader = Synthetic::new(
        &mut k,
        Some(writer.pid),
        [StdioBinding::Parent(rfd as u32), null(), null()],
        capacity,
    );
    assert_eq!(writer.call(&mut k, sys::CLOSE, vec![rfd as i64], &[]).0, 0);

    let mut sent = 0usize;
    let mut writing = false;
    let mut closed = false;
    let mut reading = false;
    let mut received = Vec::with_capacity(data.len());
    let mut step = 0usize;
    loop {
        if writing && writer.done() {
            let (n, _) = writer.take();
            assert!(n > 0, "write failed: {n}");
            sent += n as usize;
            writing = false;
        }
        if reading && reader.done() {
            let (n, bytes) = reader.take();
            assert!(n >= 0, "read failed: {n}");
            reading = false;
            if n == 0 {
                break;
            }
            received.extend_from_slice(&bytes);
        }
        let writer_turn = match step {
            0 => false,
            1 => true,
            _ => rng.gen_bool(0.5),
        };
        if writer_turn && !writing && !closed {
            if sent == data.len() {
                assert_eq!(writer.call(&mut k, sys::CLOSE, vec![wfd], &[]).0, 0);
                closed = true;
            } else {
                let len = if step == 1 {
                    (procwasm::kernel::pipe::PIPE_CAPACITY + 1).min(max_chunk)
                } else {
                    rng.gen_range(1..=max_chunk)
                }
                .min(data.len() - sent);
                writer.post(
                    &mut k,
                    sys::WRITE,
                    vec![wfd, len as i64],
                    &[&data[sent..sent + len]],
                );
                writing = true;
            }
        } else if !writer_turn && !reading {
            let len = rng.gen_range(1..=max_chunk);
            reader.post(&mut k, sys::READ, vec![0, len as i64, 0], &[]);
            reading = true;
        }
        step += 1;
        assert!(step < 10_000_000, "transfer made no progress");
    }
    Transfer {
        received,
        parks: k.park_counts(),
    }
}

/// Payload descriptors that fit the data region without overlapping,
/// placed in random order with random gaps.
pub fn random_payloads(rng: &mut impl Rng, aux: &AuxBuffer, max: usize) -> Vec<procwasm::transport::Payload> {
    use procwasm::transport::{Payload, HEADER_SIZE};
    let count = rng.gen_range(0..=max);
    let mut left = aux.data_capacity();
    let mut at = HEADER_SIZE;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let gap = rng.gen_range(0..=left.min(64));
        left -= gap;
        at += gap;
        let len = rng.gen_range(0..=left.min(4096));
        out.push(Payload::new(at as u32, len as u32));
        left -= len;
        at += len;
    }
    let n = out.len();
    for i in (1..n).rev() {
        out.swap(i, rng.gen_range(0..=i));
    }
    out
}

pub fn random_request(rng: &mut impl Rng, aux: &AuxBuffer) -> SyscallRequest {
    use procwasm::transport::{MAX_ARGS, MAX_PAYLOADS};
    let nargs = rng.gen_range(0..=MAX_ARGS);
    let args = (0..nargs).map(|_| rng.gen()).collect();
    let max = if rng.gen_bool(0.02) { MAX_PAYLOADS } else { 8 };
    SyscallRequest::new(rng.gen(), args, random_payloads(rng, aux, max))
}

pub fn random_response(rng: &mut impl Rng, aux: &AuxBuffer) -> procwasm::transport::SyscallResponse {
    use procwasm::transport::SyscallResponse;
    if rng.gen_bool(0.3) {
        let errno = rng.gen_range(1..=u32::MAX);
        SyscallResponse::err(errno)
    } else {
        SyscallResponse::with_payloads(rng.gen_range(0..=i64::MAX), random_payloads(rng, aux, 8))
    }
}

/// Runs `calls` syscalls between a shim thread and a kernel thread over one
/// traced buffer and returns the observed status transitions.
pub fn traced_stress(calls: usize, seed: u64) -> Vec<(Status, Status)> {
    use procwasm::transport::{decode_request, encode_response, post_and_wait, SyscallResponse};
    use std::sync::mpsc;

    let aux = Arc::new(AuxBuffer::with_trace(8192).unwrap());
    let (bell, rang) = mpsc::channel::<()>();
    let kernel = {
        let aux = aux.clone();
        std::thread::spawn(move || {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x5eed);
            while rang.recv().is_ok() {
                let req = decode_request(&aux).unwrap();
                if rng.gen_ratio(1, 64) {
                    std::thread::yield_now();
                }
                let sum = req
                    .args
                    .iter()
                    .fold(req.syscall_no as i64, |a, b| a.wrapping_add(*b));
                encode_response(&aux, &SyscallResponse::ok(sum & i64::MAX)).unwrap();
            }
        })
    };
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    for _ in 0..calls {
        let req = SyscallRequest::new(rng.gen_range(0..1000), vec![rng.gen_range(0..1 << 20)], vec![]);
        let expect = (req.syscall_no as i64 + req.args[0]) & i64::MAX;
        let resp = post_and_wait(&aux, &req, || {
            bell.send(())
                .map_err(|_| procwasm::transport::TransportError::KernelGone)
        })
        .unwrap();
        assert_eq!(resp.return_value, expect);
    }
    drop(bell);
    kernel.join().unwrap();
    aux.trace().unwrap()
}

/// True iff every transition is one of IDLE→REQUEST, REQUEST→DONE,
/// DONE→IDLE and they occur in that cyclic order starting from IDLE.
pub fn trace_is_clean(trace: &[(Status, Status)]) -> bool {
    let cycle = [
        (Status::Idle, Status::Request),
        (Status::Request, Status::Done),
        (Status::Done, Status::Idle),
    ];
    trace.iter().enumerate().all(|(i, t)| *t == cycle[i % 3])
}
