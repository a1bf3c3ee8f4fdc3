//! Co-processor simulation: N FPEs and one HPE behind the traffic monitor.
//!
//! Event driven. Packet arrivals set enqueue cycles, PE latencies come from the
//! simulators, and everything is converted to wall time through `freq_hz`.

mod gen;
mod peak;
mod report;
mod sim;

use serde::{Deserialize, Serialize};

use crate::fpe::FpeConfig;
use crate::hpe::HpeConfig;
use crate::traffic::{DEFAULT_THRESHOLD, QUEUE_DEPTH};

pub use gen::{gen_traffic, GenError, GenParams, GenStats, Profile};
pub use peak::{peak_search, PeakError, PeakResult};
pub use report::{FaultRecord, FlowRecord, LatencyStats, SimCounters, SimReport};
pub use sim::{run_packets, run_trace, Programs, RunError};

pub const FPGA_HZ: f64 = 250e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub name: String,
    pub fpe_count: usize,
    pub freq_hz: f64,
    pub threshold: u32,
    pub queue_depth: usize,
    pub fpe: FpeConfig,
    pub hpe: HpeConfig,
}

impl EngineConfig {
    pub fn with_fpes(name: &str, fpe_count: usize) -> Self {
        assert!(fpe_count >= 1, "need at least one FPE");
        EngineConfig {
            name: name.to_string(),
            fpe_count,
            freq_hz: FPGA_HZ,
            threshold: DEFAULT_THRESHOLD,
            queue_depth: QUEUE_DEPTH,
            fpe: FpeConfig::default(),
            hpe: HpeConfig::default(),
        }
    }

    pub fn kbase() -> Self {
        Self::with_fpes("K-Base", 1)
    }

    pub fn k4fpe() -> Self {
        Self::with_fpes("K-4FPE", 4)
    }

    pub fn k8fpe() -> Self {
        Self::with_fpes("K-8FPE", 8)
    }

    /// `kbase`, `k4fpe` or `k8fpe`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kbase" => Some(Self::kbase()),
            "k4fpe" => Some(Self::k4fpe()),
            "k8fpe" => Some(Self::k8fpe()),
            _ => None,
        }
    }

    pub fn cycles_to_ns(&self, cycles: u64) -> f64 {
        cycles as f64 / self.freq_hz * 1e9
    }
}
