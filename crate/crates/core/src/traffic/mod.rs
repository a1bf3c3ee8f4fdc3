//! Packet parsing, flow hashing, the traffic monitor, per-PE queues and the query table.

mod pcap;
mod toeplitz;

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

pub use pcap::{read_pcap, write_pcap, PcapError, PcapRecord, LINKTYPE_ETHERNET};
pub use toeplitz::{toeplitz, RSS_KEY};

/// Bytes of NN input built from each packet (the 32-byte variant is its prefix).
pub const RAW_INPUT_LEN: usize = 64;
pub const TABLE_SIZE: usize = 1 << 16;
pub const DEFAULT_THRESHOLD: u32 = 16;
pub const QUEUE_DEPTH: usize = 512;
/// Data-plane cycles added to every forwarded packet by the label lookup.
pub const QUERY_CYCLES: u64 = 5;
pub const DATA_PLANE_HZ: f64 = 322e6;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FiveTuple {
    /// Toeplitz hash of src ip, dst ip, src port, dst port, as-is (no endpoint ordering).
    pub fn flow_hash(&self) -> u32 {
        let mut b = [0u8; 12];
        b[..4].copy_from_slice(&self.src_ip.octets());
        b[4..8].copy_from_slice(&self.dst_ip.octets());
        b[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        b[10..].copy_from_slice(&self.dst_port.to_be_bytes());
        toeplitz(&RSS_KEY, &b)
    }
}

pub fn table_index(hash: u32) -> usize {
    hash as usize % TABLE_SIZE
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_ns: u64,
    pub tuple: FiveTuple,
    pub wire_len: u32,
    /// Ports, protocol, then the first 59 payload bytes, zero-padded.
    pub raw_input: [u8; RAW_INPUT_LEN],
}

impl PacketRecord {
    /// NN input of `len` bytes (32 or 64).
    pub fn input(&self, len: usize) -> &[u8] {
        &self.raw_input[..len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skip {
    NotIpv4,
    Truncated,
}

/// Parses an Ethernet frame carrying IPv4. VLAN tags are stepped over.
pub fn parse_packet(frame: &[u8], ts_ns: u64, wire_len: u32) -> Result<PacketRecord, Skip> {
    let mut at = 12;
    let ethertype = loop {
        let t = u16::from_be_bytes(frame.get(at..at + 2).ok_or(Skip::Truncated)?.try_into().unwrap());
        if t == 0x8100 || t == 0x88a8 {
            at += 4;
        } else {
            break t;
        }
    };
    if ethertype != 0x0800 {
        return Err(Skip::NotIpv4);
    }
    let ip = frame.get(at + 2..).ok_or(Skip::Truncated)?;
    if ip.len() < 20 {
        return Err(Skip::Truncated);
    }
    if ip[0] >> 4 != 4 {
        return Err(Skip::NotIpv4);
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if ihl < 20 || ip.len() < ihl || total < ihl {
        return Err(Skip::Truncated);
    }
    let protocol = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    // The capture may stop before the end of the datagram.
    let l4 = &ip[ihl..total.min(ip.len())];
    let l4_total = total - ihl;
    let (src_port, dst_port, hdr) = match protocol {
        PROTO_TCP => {
            if l4.len() < 20 {
                return Err(Skip::Truncated);
            }
            (u16::from_be_bytes([l4[0], l4[1]]), u16::from_be_bytes([l4[2], l4[3]]), ((l4[12] >> 4) as usize * 4).max(20))
        }
        PROTO_UDP => {
            if l4.len() < 8 {
                return Err(Skip::Truncated);
            }
            (u16::from_be_bytes([l4[0], l4[1]]), u16::from_be_bytes([l4[2], l4[3]]), 8)
        }
        _ => (0, 0, 0),
    };
    if hdr > l4_total {
        return Err(Skip::Truncated);
    }
    let payload = l4.get(hdr..).unwrap_or(&[]);
    let mut raw_input = [0u8; RAW_INPUT_LEN];
    raw_input[..2].copy_from_slice(&src_port.to_be_bytes());
    raw_input[2..4].copy_from_slice(&dst_port.to_be_bytes());
    raw_input[4] = protocol;
    let n = payload.len().min(RAW_INPUT_LEN - 5);
    raw_input[5..5 + n].copy_from_slice(&payload[..n]);
    Ok(PacketRecord { ts_ns, tuple: FiveTuple { src_ip, dst_ip, src_port, dst_port, protocol }, wire_len, raw_input })
}

/// Builds an Ethernet + IPv4 + TCP/UDP frame with the given payload.
pub fn build_frame(t: &FiveTuple, payload: &[u8]) -> Vec<u8> {
    let l4_len = if t.protocol == PROTO_TCP { 20 } else { 8 };
    let total = 20 + l4_len + payload.len();
    let mut f = Vec::with_capacity(14 + total);
    f.extend([0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2, 0x08, 0x00]);
    f.extend([0x45, 0, (total >> 8) as u8, total as u8, 0, 0, 0x40, 0, 64, t.protocol, 0, 0]);
    f.extend(t.src_ip.octets());
    f.extend(t.dst_ip.octets());
    f.extend(t.src_port.to_be_bytes());
    f.extend(t.dst_port.to_be_bytes());
    if t.protocol == PROTO_TCP {
        f.extend([0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x18, 0xff, 0xff, 0, 0, 0, 0]);
    } else {
        f.extend([((8 + payload.len()) >> 8) as u8, (8 + payload.len()) as u8, 0, 0]);
    }
    f.extend(payload);
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowEntry {
    pub key_hash: u32,
    pub packet_count: u32,
    pub first_seen: bool,
    pub elephant_dispatched: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Fast,
    Slow,
}

/// What the monitor asks of the inference paths for one packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dispatch {
    Fast,
    Slow,
    None,
}

/// First-seen detection and per-flow packet counting, indexed by hash.
/// A different flow landing on an occupied slot replaces it.
pub struct FlowTable {
    entries: Vec<Option<FlowEntry>>,
    pub threshold: u32,
    pub collisions: u64,
}

impl FlowTable {
    pub fn new(threshold: u32) -> Self {
        assert!(threshold >= 2, "the first packet of a flow always takes the fast path");
        FlowTable { entries: vec![None; TABLE_SIZE], threshold, collisions: 0 }
    }

    pub fn get(&self, hash: u32) -> Option<&FlowEntry> {
        self.entries[table_index(hash)].as_ref().filter(|e| e.key_hash == hash)
    }

    pub fn update(&mut self, hash: u32) -> Dispatch {
        let slot = &mut self.entries[table_index(hash)];
        match slot {
            Some(e) if e.key_hash == hash => {
                e.packet_count = e.packet_count.saturating_add(1);
                if e.packet_count == self.threshold && !e.elephant_dispatched {
                    e.elephant_dispatched = true;
                    Dispatch::Slow
                } else {
                    Dispatch::None
                }
            }
            other => {
                if other.is_some() {
                    self.collisions += 1;
                }
                *other = Some(FlowEntry { key_hash: hash, packet_count: 1, first_seen: true, elephant_dispatched: false });
                Dispatch::Fast
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub key_hash: u32,
    pub label: u32,
    pub source: Path,
    pub result_cycle: u64,
}

/// Labels the data-plane reads by flow hash.
pub struct QueryTable {
    entries: Vec<Option<QueryEntry>>,
}

impl Default for QueryTable {
    fn default() -> Self {
        QueryTable { entries: vec![None; TABLE_SIZE] }
    }
}

impl QueryTable {
    /// Stores a result. A fast result never replaces a slow one for the same flow.
    pub fn write(&mut self, e: QueryEntry) -> bool {
        let slot = &mut self.entries[table_index(e.key_hash)];
        if let Some(cur) = slot {
            if cur.key_hash == e.key_hash && cur.source == Path::Slow && e.source == Path::Fast {
                return false;
            }
        }
        *slot = Some(e);
        true
    }

    /// Current label for the flow and the data-plane cycles the lookup costs.
    pub fn query(&self, t: &FiveTuple) -> (Option<QueryEntry>, u64) {
        let h = t.flow_hash();
        (self.entries[table_index(h)].filter(|e| e.key_hash == h), QUERY_CYCLES)
    }
}

pub fn query_charge_ns() -> f64 {
    QUERY_CYCLES as f64 / DATA_PLANE_HZ * 1e9
}

/// Bounded FIFO with drop accounting.
#[derive(Clone, Debug)]
pub struct Fifo<T> {
    items: VecDeque<T>,
    pub depth: usize,
    pub enqueued: u64,
    pub dropped: u64,
}

impl<T> Fifo<T> {
    pub fn new(depth: usize) -> Self {
        Fifo { items: VecDeque::new(), depth, enqueued: 0, dropped: 0 }
    }

    /// Returns false (and counts a drop) when full.
    pub fn push(&mut self, x: T) -> bool {
        if self.items.len() >= self.depth {
            self.dropped += 1;
            return false;
        }
        self.enqueued += 1;
        self.items.push_back(x);
        true
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests;
