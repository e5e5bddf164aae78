//! A Unix-like process environment for WebAssembly guests.
//!
//! Guests reach the kernel only through a per-process auxiliary buffer:
//! the shim copies syscall arguments out of linear memory into the buffer,
//! the kernel answers in the same buffer, and the shim copies results back.
//! On top of that sit a benchmarking harness and a statistics module.

pub mod abi;
pub mod fixtures;
pub mod guest_exec;
pub mod harness;
pub mod kernel;
pub mod runtime;
pub mod stats_report;
pub mod transport;
