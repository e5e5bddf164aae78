//! Performance-counter providers and per-process counter sessions.
//!
//! A session is opened on the guest's own thread immediately before its
//! entry point runs and closed when the entry returns, so it covers the
//! guest alone. Kernel work happens on the event-loop thread and is not
//! attributed to any process.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::guest_exec::ExecCounters;

/// One performance event: its report name and platform encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterSpec {
    pub name: &'static str,
    /// `perf` style descriptor: `rUUEE` for raw x86 events, otherwise the
    /// generic event name.
    pub descriptor: &'static str,
}

pub const ALL_LOADS: &str = "all-loads-retired";
pub const ALL_STORES: &str = "all-stores-retired";
pub const BRANCHES: &str = "branches-retired";
pub const COND_BRANCHES: &str = "conditional-branches";
pub const INSTRUCTIONS: &str = "instructions-retired";
pub const CPU_CYCLES: &str = "cpu-cycles";
pub const L1I_MISSES: &str = "L1-icache-load-misses";

/// The default event set.
pub const DEFAULT_EVENTS: [CounterSpec; 7] = [
    CounterSpec {
        name: ALL_LOADS,
        descriptor: "r81d0",
    },
    CounterSpec {
        name: ALL_STORES,
        descriptor: "r82d0",
    },
    CounterSpec {
        name: BRANCHES,
        descriptor: "r00c4",
    },
    CounterSpec {
        name: COND_BRANCHES,
        descriptor: "r01c4",
    },
    CounterSpec {
        name: INSTRUCTIONS,
        descriptor: "r1c0",
    },
    CounterSpec {
        name: CPU_CYCLES,
        descriptor: "cpu-cycles",
    },
    CounterSpec {
        name: L1I_MISSES,
        descriptor: "L1-icache-load-misses",
    },
];

impl CounterSpec {
    /// Config value of a raw descriptor (`r81d0` → 0x81d0).
    pub fn raw_config(&self) -> Option<u64> {
        let hex = self.descriptor.strip_prefix('r')?;
        u64::from_str_radix(hex, 16).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hardware,
    Software,
    Null,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Hardware => "hardware",
            ProviderKind::Software => "software",
            ProviderKind::Null => "null",
        })
    }
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hardware" => Ok(ProviderKind::Hardware),
            "software" => Ok(ProviderKind::Software),
            "null" => Ok(ProviderKind::Null),
            other => Err(format!("unknown counter provider {other:?}")),
        }
    }
}

/// Counts collected over one session. An event the provider could not
/// measure is absent from `counts`; it is never recorded as zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSet {
    pub provider: ProviderKind,
    pub counts: BTreeMap<String, u64>,
}

impl CounterSet {
    pub fn empty(provider: ProviderKind) -> Self {
        CounterSet {
            provider,
            counts: BTreeMap::new(),
        }
    }

    pub fn get(&self, event: &str) -> Option<u64> {
        self.counts.get(event).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CounterError {
    #[error("counter provider unavailable: {0}")]
    ProviderUnavailable(String),
}

/// An open session. `end` receives the interpreter's counts over the same
/// window, which the software provider reports directly.
pub trait CounterSession: Send {
    fn end(self: Box<Self>, exec: &ExecCounters) -> CounterSet;
}

pub trait CounterProvider: Send + Sync + fmt::Debug {
    fn kind(&self) -> ProviderKind;
    /// Called on the thread that is about to run the guest.
    fn begin(&self) -> Box<dyn CounterSession>;
}

#[derive(Debug, Default)]
pub struct NullProvider;

struct NullSession;

impl CounterSession for NullSession {
    fn end(self: Box<Self>, _: &ExecCounters) -> CounterSet {
        CounterSet::empty(ProviderKind::Null)
    }
}

impl CounterProvider for NullProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Null
    }

    fn begin(&self) -> Box<dyn CounterSession> {
        Box::new(NullSession)
    }
}

/// Interpreter-backed analogs of the retired-instruction events. Cycles and
/// instruction-cache misses have no analog and stay absent.
#[derive(Debug, Default)]
pub struct SoftwareProvider;

struct SoftwareSession;

impl CounterSession for SoftwareSession {
    fn end(self: Box<Self>, exec: &ExecCounters) -> CounterSet {
        let mut set = CounterSet::empty(ProviderKind::Software);
        for (name, v) in [
            (ALL_LOADS, exec.loads),
            (ALL_STORES, exec.stores),
            (BRANCHES, exec.branches),
            (COND_BRANCHES, exec.conditional_branches),
            (INSTRUCTIONS, exec.instructions),
        ] {
            set.counts.insert(name.to_string(), v);
        }
        set
    }
}

impl CounterProvider for SoftwareProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Software
    }

    fn begin(&self) -> Box<dyn CounterSession> {
        Box::new(SoftwareSession)
    }
}

#[cfg(target_os = "linux")]
mod hw {
    use super::*;
    use perf_event::events::{Cache, CacheId, CacheOp, CacheResult, Hardware, Raw};
    use perf_event::{Builder, Counter};

    /// Hardware counters through `perf_event_open`, observing the calling
    /// thread in user mode.
    #[derive(Debug)]
    pub struct HardwareProvider {
        events: Vec<CounterSpec>,
    }

    fn builder(spec: &CounterSpec) -> Option<Builder<'static>> {
        if let Some(config) = spec.raw_config() {
            return Some(Builder::new(Raw::new(config)));
        }
        match spec.name {
            CPU_CYCLES => Some(Builder::new(Hardware::CPU_CYCLES)),
            L1I_MISSES => Some(Builder::new(Cache {
                which: CacheId::L1I,
                operation: CacheOp::READ,
                result: CacheResult::MISS,
            })),
            _ => None,
        }
    }

    fn open(spec: &CounterSpec) -> std::io::Result<Counter> {
        let mut b = builder(spec)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::Unsupported, "no encoding"))?;
        b.observe_self().any_cpu().build()
    }

    impl HardwareProvider {
        /// Succeeds if at least one of `events` can be opened here.
        pub fn probe(events: &[CounterSpec]) -> Result<Self, CounterError> {
            let mut last = None;
            for spec in events {
                match open(spec) {
                    Ok(_) => {
                        return Ok(HardwareProvider {
                            events: events.to_vec(),
                        })
                    }
                    Err(e) => last = Some(format!("{}: {e}", spec.name)),
                }
            }
            Err(CounterError::ProviderUnavailable(
                last.unwrap_or_else(|| "no events requested".into()),
            ))
        }
    }

    struct HwSession {
        counters: Vec<(&'static str, Counter)>,
    }

    impl CounterSession for HwSession {
        fn end(mut self: Box<Self>, _: &ExecCounters) -> CounterSet {
            let mut set = CounterSet::empty(ProviderKind::Hardware);
            for (_, c) in &mut self.counters {
                let _ = c.disable();
            }
            for (name, c) in &mut self.counters {
                match c.read_count_and_time() {
                    // Scale for multiplexing; never-scheduled events stay absent.
                    Ok(ct) if ct.time_running > 0 => {
                        let scaled =
                            (ct.count as u128 * ct.time_enabled as u128 / ct.time_running as u128) as u64;
                        set.counts.insert(name.to_string(), scaled);
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("reading {name}: {e}"),
                }
            }
            set
        }
    }

    impl CounterProvider for HardwareProvider {
        fn kind(&self) -> ProviderKind {
            ProviderKind::Hardware
        }

        fn begin(&self) -> Box<dyn CounterSession> {
            let mut counters = Vec::new();
            for spec in &self.events {
                match open(spec) {
                    Ok(c) => counters.push((spec.name, c)),
                    Err(e) => log::debug!("{} unavailable: {e}", spec.name),
                }
            }
            for (name, c) in &mut counters {
                if let Err(e) = c.enable() {
                    log::warn!("enabling {name}: {e}");
                }
            }
            Box::new(HwSession { counters })
        }
    }
}

#[cfg(target_os = "linux")]
pub use hw::HardwareProvider;

/// Stand-in on platforms without `perf_event_open`.
#[cfg(not(target_os = "linux"))]
#[derive(Debug)]
pub struct HardwareProvider;

#[cfg(not(target_os = "linux"))]
impl HardwareProvider {
    pub fn probe(_: &[CounterSpec]) -> Result<Self, CounterError> {
        Err(CounterError::ProviderUnavailable("unsupported platform".into()))
    }
}

#[cfg(not(target_os = "linux"))]
impl CounterProvider for HardwareProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Hardware
    }

    fn begin(&self) -> Box<dyn CounterSession> {
        Box::new(NullSession)
    }
}

/// Builds the requested provider. An unavailable hardware provider falls
/// back to the null provider with a warning.
pub fn provider(kind: ProviderKind) -> std::sync::Arc<dyn CounterProvider> {
    match kind {
        ProviderKind::Null => std::sync::Arc::new(NullProvider),
        ProviderKind::Software => std::sync::Arc::new(SoftwareProvider),
        ProviderKind::Hardware => match HardwareProvider::probe(&DEFAULT_EVENTS) {
            Ok(p) => std::sync::Arc::new(p),
            Err(e) => {
                log::warn!("{e}; falling back to the null provider");
                std::sync::Arc::new(NullProvider)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_descriptors() {
        let configs: Vec<_> = DEFAULT_EVENTS.iter().map(|s| s.raw_config()).collect();
        assert_eq!(
            configs,
            [
                Some(0x81d0),
                Some(0x82d0),
                Some(0xc4),
                Some(0x1c4),
                Some(0x1c0),
                None,
                None
            ]
        );
    }

    #[test]
    fn null_and_software_sets() {
        let exec = ExecCounters {
            instructions: 10,
            loads: 3,
            stores: 2,
            branches: 4,
            conditional_branches: 1,
        };
        assert!(NullProvider.begin().end(&exec).is_empty());
        let set = SoftwareProvider.begin().end(&exec);
        assert_eq!(set.get(INSTRUCTIONS), Some(10));
        assert_eq!(set.get(ALL_STORES), Some(2));
        assert_eq!(set.get(CPU_CYCLES), None);
    }
}
