//! Classic libpcap files: both byte orders, microsecond and nanosecond stamps.

use thiserror::Error;

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts_ns: u64,
    /// Length on the wire; `data` may be shorter if the capture was truncated.
    pub orig_len: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcapError {
    #[error("not a pcap file (magic {0:08x})")]
    Magic(u32),
    #[error("truncated pcap {0}")]
    Truncated(&'static str),
    #[error("unsupported link type {0}")]
    LinkType(u32),
}

pub fn read_pcap(bytes: &[u8]) -> Result<Vec<PcapRecord>, PcapError> {
    let head = bytes.get(..24).ok_or(PcapError::Truncated("global header"))?;
    let raw = u32::from_le_bytes(head[..4].try_into().unwrap());
    let (le, nanos) = match raw {
        MAGIC_US => (true, false),
        MAGIC_NS => (true, true),
        m if m.swap_bytes() == MAGIC_US => (false, false),
        m if m.swap_bytes() == MAGIC_NS => (false, true),
        m => return Err(PcapError::Magic(m)),
    };
    let u32_at = |b: &[u8], at: usize| {
        let w: [u8; 4] = b[at..at + 4].try_into().unwrap();
        if le {
            u32::from_le_bytes(w)
        } else {
            u32::from_be_bytes(w)
        }
    };
    let link = u32_at(head, 20);
    if link != LINKTYPE_ETHERNET {
        return Err(PcapError::LinkType(link));
    }
    let mut out = Vec::new();
    let mut at = 24;
    while at < bytes.len() {
        let rec = bytes.get(at..at + 16).ok_or(PcapError::Truncated("record header"))?;
        let (sec, frac, incl, orig) = (u32_at(rec, 0), u32_at(rec, 4), u32_at(rec, 8), u32_at(rec, 12));
        let data = bytes.get(at + 16..at + 16 + incl as usize).ok_or(PcapError::Truncated("record data"))?;
        let sub = if nanos { frac as u64 } else { frac as u64 * 1000 };
        out.push(PcapRecord { ts_ns: sec as u64 * 1_000_000_000 + sub, orig_len: orig, data: data.to_vec() });
        at += 16 + incl as usize;
    }
    Ok(out)
}

/// Writes a little-endian nanosecond-resolution Ethernet capture.
pub fn write_pcap(records: &[PcapRecord], snaplen: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + records.iter().map(|r| 16 + r.data.len()).sum::<usize>());
    out.extend(MAGIC_NS.to_le_bytes());
    out.extend(2u16.to_le_bytes());
    out.extend(4u16.to_le_bytes());
    out.extend(0i32.to_le_bytes());
    out.extend(0u32.to_le_bytes());
    out.extend(snaplen.to_le_bytes());
    out.extend(LINKTYPE_ETHERNET.to_le_bytes());
    for r in records {
        out.extend(((r.ts_ns / 1_000_000_000) as u32).to_le_bytes());
        out.extend(((r.ts_ns % 1_000_000_000) as u32).to_le_bytes());
        out.extend((r.data.len() as u32).to_le_bytes());
        out.extend(r.orig_len.to_le_bytes());
        out.extend(&r.data);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs() -> Vec<PcapRecord> {
        vec![
            PcapRecord { ts_ns: 1_500_000_123, orig_len: 60, data: vec![1; 60] },
            PcapRecord { ts_ns: 2_000_000_000, orig_len: 1500, data: vec![2; 100] },
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = write_pcap(&recs(), 128);
        assert_eq!(read_pcap(&bytes).unwrap(), recs());
    }

    #[test]
    fn microsecond_big_endian() {
        let mut b = Vec::new();
        b.extend(MAGIC_US.to_be_bytes());
        b.extend(2u16.to_be_bytes());
        b.extend(4u16.to_be_bytes());
        b.extend([0; 8]);
        b.extend(65535u32.to_be_bytes());
        b.extend(1u32.to_be_bytes());
        b.extend(3u32.to_be_bytes());
        b.extend(250u32.to_be_bytes());
        b.extend(2u32.to_be_bytes());
        b.extend(64u32.to_be_bytes());
        b.extend([9, 9]);
        let r = read_pcap(&b).unwrap();
        assert_eq!(r, vec![PcapRecord { ts_ns: 3_000_250_000, orig_len: 64, data: vec![9, 9] }]);
    }

    #[test]
    fn errors() {
        assert_eq!(read_pcap(&[0; 10]), Err(PcapError::Truncated("global header")));
        assert!(matches!(read_pcap(&[0; 24]), Err(PcapError::Magic(0))));
        let mut b = write_pcap(&recs(), 128);
        b.truncate(b.len() - 1);
        assert_eq!(read_pcap(&b), Err(PcapError::Truncated("record data")));
        let mut b = write_pcap(&[], 128);
        b[20] = 101;
        assert_eq!(read_pcap(&b), Err(PcapError::LinkType(101)));
    }
}
