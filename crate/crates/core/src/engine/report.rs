use serde::{Deserialize, Serialize};

use super::EngineConfig;
use crate::traffic::{FiveTuple, Path};

/// One row per flow hash, in first-seen order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_hash: u32,
    pub tuple: FiveTuple,
    pub packets: u64,
    pub fast_label: Option<u32>,
    pub fast_latency_cycles: Option<u64>,
    pub fast_latency_ns: Option<f64>,
    pub slow_label: Option<u32>,
    pub slow_latency_cycles: Option<u64>,
    pub slow_latency_ns: Option<f64>,
    /// Query-table entry for the flow once the trace has drained.
    pub final_label: Option<u32>,
    pub final_source: Option<Path>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimCounters {
    pub parsed: u64,
    pub skipped: u64,
    pub forwarded: u64,
    pub fast_dispatches: u64,
    pub slow_dispatches: u64,
    pub fast_completed: u64,
    pub slow_completed: u64,
    /// Per FPE, then the HPE last.
    pub enqueued_per_queue: Vec<u64>,
    pub drops_per_queue: Vec<u64>,
    pub drops_total: u64,
    pub collisions: u64,
    /// Fast results refused because a slow label was already in place.
    pub fast_writes_refused: u64,
    pub query_hits: u64,
    pub stall_cycles: u64,
    pub faults: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub max_ns: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over cycle counts.
    pub fn from_cycles(cycles: &[u64], freq_hz: f64) -> Self {
        if cycles.is_empty() {
            return Self::default();
        }
        let mut v = cycles.to_vec();
        v.sort_unstable();
        let ns = |c: u64| c as f64 / freq_hz * 1e9;
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats {
            count: v.len() as u64,
            mean_ns: ns(v.iter().sum::<u64>()) / v.len() as f64,
            p50_ns: ns(rank(0.50)),
            p99_ns: ns(rank(0.99)),
            max_ns: ns(*v.last().unwrap()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    /// FPE index, or `fpe_count` for the HPE.
    pub pe: usize,
    pub flow_hash: u32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: EngineConfig,
    pub fast_program_bundles: usize,
    pub slow_program_bundles: usize,
    pub counters: SimCounters,
    pub trace_duration_ns: f64,
    /// Last completion minus first arrival.
    pub makespan_ns: f64,
    pub offered_flows_fps: f64,
    pub offered_gbps: f64,
    pub inference_fps: f64,
    pub fast_latency: LatencyStats,
    pub slow_latency: LatencyStats,
    /// Query charge added to every forwarded packet by the data plane.
    pub dp_query_cycles_per_packet: u64,
    pub dp_query_ns_per_packet: f64,
    pub faults: Vec<FaultRecord>,
    pub flows: Vec<FlowRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat per-flow table for plotting.
    pub fn flows_csv(&self) -> String {
        let opt = |x: Option<String>| x.unwrap_or_default();
        let mut s = String::from(
            "flow_hash,src_ip,dst_ip,src_port,dst_port,protocol,packets,fast_label,fast_latency_ns,slow_label,slow_latency_ns,final_label\n",
        );
        for f in &self.flows {
            let t = &f.tuple;
            s += &format!(
                "{:08x},{},{},{},{},{},{},{},{},{},{},{}\n",
                f.flow_hash,
                t.src_ip,
                t.dst_ip,
                t.src_port,
                t.dst_port,
                t.protocol,
                f.packets,
                opt(f.fast_label.map(|x| x.to_string())),
                opt(f.fast_latency_ns.map(|x| format!("{x:.3}"))),
                opt(f.slow_label.map(|x| x.to_string())),
                opt(f.slow_latency_ns.map(|x| format!("{x:.3}"))),
                opt(f.final_label.map(|x| x.to_string())),
            );
        }
        s
    }

    /// Short human summary.
    pub fn summary(&self) -> String {
        let c = &self.counters;
        format!(
            "{} ({} FPE @ {:.0} MHz): {} packets parsed, {} skipped; {} fast / {} slow dispatches; {} drops; \
             fast p50 {:.1} ns p99 {:.1} ns; slow p99 {:.1} ns; {} collisions; {} faults",
            self.config.name,
            self.config.fpe_count,
            self.config.freq_hz / 1e6,
            c.parsed,
            c.skipped,
            c.fast_dispatches,
            c.slow_dispatches,
            c.drops_total,
            self.fast_latency.p50_ns,
            self.fast_latency.p99_ns,
            self.slow_latency.p99_ns,
            c.collisions,
            c.faults,
        )
    }
}
