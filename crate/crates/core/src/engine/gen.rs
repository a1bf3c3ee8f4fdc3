use std::collections::HashSet;
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traffic::{build_frame, table_index, FiveTuple, PcapRecord, DEFAULT_THRESHOLD, PROTO_TCP, PROTO_UDP, TABLE_SIZE};

/// Flows per trace are capped so that rejection sampling for unique table slots stays cheap.
pub const MAX_FLOWS: usize = TABLE_SIZE / 2;
const ETH_IP: usize = 14 + 20;

/// Share of flows that are elephants in the ISCX-like mix.
pub const ISCX_ELEPHANT_SHARE: f64 = 0.1026;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// Every flow has `packets` packets of `payload` bytes.
    Uniform { packets: u32, payload: usize },
    /// Flow i has `packets[i % len]` packets.
    Explicit { packets: Vec<u32>, payload: usize },
    /// About a tenth of flows are long and carry big packets; the rest are short with small ones.
    IscxLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub flows: usize,
    pub profile: Profile,
    /// New flows per second. 0 starts every flow at once.
    pub flow_rate_fps: f64,
    pub packet_gap_ns: u64,
    pub seed: u64,
    pub snaplen: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { flows: 1000, profile: Profile::IscxLike, flow_rate_fps: 100_000.0, packet_gap_ns: 1_000, seed: 1, snaplen: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub flows: usize,
    pub packets: usize,
    pub wire_bytes: u64,
    /// Flows with at least this many packets count as elephants.
    pub elephant_threshold: u32,
    pub elephant_flows: usize,
    pub elephant_flow_share: f64,
    pub elephant_byte_share: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("{0} flows requested, at most {MAX_FLOWS} supported")]
    TooManyFlows(usize),
    #[error("invalid traffic parameters: {0}")]
    Invalid(String),
}

fn random_tuple(rng: &mut ChaCha8Rng) -> FiveTuple {
    FiveTuple {
        src_ip: Ipv4Addr::from(0x0a00_0000 | rng.gen_range(0..1u32 << 24)),
        dst_ip: Ipv4Addr::from(0xac10_0000 | rng.gen_range(0..1u32 << 20)),
        src_port: rng.gen_range(1024..=65535),
        dst_port: *[80u16, 443, 53, 22, 8080, 5060].choose(rng).unwrap(),
        protocol: if rng.gen_bool(0.8) { PROTO_TCP } else { PROTO_UDP },
    }
}

/// Frame whose headers describe `wire_payload` bytes but which carries only `captured`.
fn frame(t: &FiveTuple, captured: &[u8], wire_payload: usize) -> (Vec<u8>, u32) {
    let mut f = build_frame(t, captured);
    let l4 = if t.protocol == PROTO_TCP { 20 } else { 8 };
    let total = (20 + l4 + wire_payload) as u16;
    f[16..18].copy_from_slice(&total.to_be_bytes());
    if t.protocol == PROTO_UDP {
        f[ETH_IP + 4..ETH_IP + 6].copy_from_slice(&((8 + wire_payload) as u16).to_be_bytes());
    }
    (f, (14 + total as usize) as u32)
}

/// Deterministic synthetic trace. Every flow occupies its own flow-table slot.
pub fn gen_traffic(p: &GenParams) -> Result<(Vec<PcapRecord>, GenStats), GenError> {
    if p.flows > MAX_FLOWS {
        return Err(GenError::TooManyFlows(p.flows));
    }
    if (p.snaplen as usize) < ETH_IP + 20 {
        return Err(GenError::Invalid(format!("snaplen {} cannot hold the headers", p.snaplen)));
    }
    if !(p.flow_rate_fps >= 0.0 && p.flow_rate_fps.is_finite()) {
        return Err(GenError::Invalid(format!("flow rate {}", p.flow_rate_fps)));
    }
    match &p.profile {
        Profile::Uniform { packets: 0, .. } => return Err(GenError::Invalid("flows need at least one packet".into())),
        Profile::Explicit { packets, .. } if packets.is_empty() || packets.contains(&0) => {
            return Err(GenError::Invalid("explicit packet counts must be non-empty and positive".into()))
        }
        Profile::Uniform { payload, .. } | Profile::Explicit { payload, .. } if *payload > 1400 => {
            return Err(GenError::Invalid(format!("payload {payload} exceeds 1400 bytes")))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut used = HashSet::new();
    let tuples: Vec<FiveTuple> = (0..p.flows)
        .map(|_| loop {
            let t = random_tuple(&mut rng);
            if used.insert(table_index(t.flow_hash())) {
                break t;
            }
        })
        .collect();
    let elephants: HashSet<usize> = match p.profile {
        Profile::IscxLike => {
            let n = (p.flows as f64 * ISCX_ELEPHANT_SHARE).round() as usize;
            rand::seq::index::sample(&mut rng, p.flows, n).into_iter().collect()
        }
        _ => HashSet::new(),
    };

    let mut out = Vec::new();
    let mut per_flow = Vec::with_capacity(p.flows);
    for (i, t) in tuples.iter().enumerate() {
        let start = if p.flow_rate_fps > 0.0 { (i as f64 * 1e9 / p.flow_rate_fps) as u64 } else { 0 };
        // Packet count and the payload size range.
        let (count, sizes) = match &p.profile {
            Profile::Uniform { packets, payload } => (*packets, *payload..=*payload),
            Profile::Explicit { packets, payload } => (packets[i % packets.len()], *payload..=*payload),
            Profile::IscxLike if elephants.contains(&i) => (rng.gen_range(16..=64), 1000..=1400),
            Profile::IscxLike => (rng.gen_range(1..=6), 0..=250),
        };
        let l4 = if t.protocol == PROTO_TCP { 20 } else { 8 };
        let mut bytes = 0u64;
        for j in 0..count {
            let wire_payload = rng.gen_range(sizes.clone());
            let cap = wire_payload.min(p.snaplen as usize - ETH_IP - l4);
            let payload: Vec<u8> = (0..cap).map(|_| rng.gen()).collect();
            let (data, orig_len) = frame(t, &payload, wire_payload);
            bytes += orig_len as u64;
            out.push((start + j as u64 * p.packet_gap_ns, i, PcapRecord { ts_ns: 0, orig_len, data }));
        }
        per_flow.push((count, bytes));
    }
    out.sort_by_key(|(ts, i, _)| (*ts, *i));
    let records: Vec<PcapRecord> = out.into_iter().map(|(ts, _, r)| PcapRecord { ts_ns: ts, ..r }).collect();

    let wire_bytes: u64 = per_flow.iter().map(|f| f.1).sum();
    let big: Vec<&(u32, u64)> = per_flow.iter().filter(|f| f.0 >= DEFAULT_THRESHOLD).collect();
    let share = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let stats = GenStats {
        flows: p.flows,
        packets: records.len(),
        wire_bytes,
        elephant_threshold: DEFAULT_THRESHOLD,
        elephant_flows: big.len(),
        elephant_flow_share: share(big.len() as f64, p.flows as f64),
        elephant_byte_share: share(big.iter().map(|f| f.1 as f64).sum(), wire_bytes as f64),
    };
    Ok((records, stats))
}
