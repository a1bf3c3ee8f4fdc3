use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sim::{Programs, RunError, Runners, Sim};
use super::EngineConfig;
use crate::traffic::{FiveTuple, PacketRecord, PROTO_TCP, RAW_INPUT_LEN};

/// Arrival spacing is searched in 1/1024ths of a cycle.
const SUBCYCLE: u64 = 1024;
const PAYLOAD_POOL: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakResult {
    pub peak_fps: f64,
    pub flows: usize,
    /// Smallest drop-free arrival spacing, in 1/1024 cycle.
    pub spacing_subcycles: u64,
    /// Every spacing tried and the drops it caused.
    pub probes: Vec<(u64, u64)>,
}

#[derive(Debug, Error)]
pub enum PeakError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("all {0} flows fit in the queues at once; use more flows per FPE")]
    Unbounded(usize),
    #[error("drops are not monotone in rate: spacing {passing} is drop-free but {failing} drops")]
    NonMonotone { passing: u64, failing: u64 },
}

/// Single-packet flows with distinct tuples and payloads drawn from a small pool.
fn workload(flows: usize, seed: u64) -> Vec<PacketRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<[u8; RAW_INPUT_LEN]> = (0..PAYLOAD_POOL)
        .map(|_| {
            let mut b = [0u8; RAW_INPUT_LEN];
            rng.fill(&mut b[..]);
            b
        })
        .collect();
    (0..flows)
        .map(|k| {
            let tuple = FiveTuple {
                src_ip: Ipv4Addr::from(0x0a00_0000 + (k as u32 >> 8)),
                dst_ip: Ipv4Addr::new(172, 16, 0, 1),
                src_port: 1024 + (k & 0xff) as u16,
                dst_port: 443,
                protocol: PROTO_TCP,
            };
            let mut raw_input = pool[k % PAYLOAD_POOL];
            raw_input[..2].copy_from_slice(&tuple.src_port.to_be_bytes());
            raw_input[2..4].copy_from_slice(&tuple.dst_port.to_be_bytes());
            raw_input[4] = PROTO_TCP;
            PacketRecord { ts_ns: 0, tuple, wire_len: 128, raw_input }
        })
        .collect()
}

fn drops(cfg: &EngineConfig, runners: &mut Runners, packets: &[PacketRecord], spacing: u64) -> u64 {
    let mut sim = Sim::new(cfg, packets);
    for k in 0..packets.len() {
        sim.arrive(runners, k as u64 * spacing / SUBCYCLE, k);
    }
    sim.advance(runners, None);
    sim.drops()
}

/// Highest rate of new single-packet flows the configuration absorbs with zero drops.
///
/// `flows_per_fpe` scales the trace with the FPE count so that queue buffering
/// hides the same fraction of overload in every configuration.
pub fn peak_search(cfg: &EngineConfig, progs: &Programs, flows_per_fpe: usize, seed: u64) -> Result<PeakResult, PeakError> {
    let flows = flows_per_fpe * cfg.fpe_count;
    let packets = workload(flows, seed);
    let mut runners = Runners::new(cfg, progs)?;
    let mut probes = Vec::new();
    let mut probe = |s: u64| {
        let d = drops(cfg, &mut runners, &packets, s);
        probes.push((s, d));
        d
    };
    if probe(0) == 0 {
        return Err(PeakError::Unbounded(flows));
    }
    let (mut lo, mut hi) = (0, 1);
    while probe(hi) > 0 {
        (lo, hi) = (hi, hi * 2);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if probe(mid) == 0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Spot checks: slower arrivals must stay drop-free.
    for s in [hi + 1, hi + hi / 2, 2 * hi] {
        if probe(s) > 0 {
            return Err(PeakError::NonMonotone { passing: hi, failing: s });
        }
    }
    Ok(PeakResult { peak_fps: cfg.freq_hz * SUBCYCLE as f64 / hi as f64, flows, spacing_subcycles: hi, probes })
}
