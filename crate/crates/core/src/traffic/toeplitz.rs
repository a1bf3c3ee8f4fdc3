//! Toeplitz receive-side-scaling hash.

/// The 40-byte key used by most NIC drivers and the published verification suite.
pub const RSS_KEY: [u8; 40] = [
    0x6d, 0x5a, 0x56, 0xda, 0x25, 0x5b, 0x0e, 0xc2, 0x41, 0x67, 0x25, 0x3d, 0x43, 0xa3, 0x8f, 0xb0, 0xd0, 0xca, 0x2b, 0xcb,
    0xae, 0x7b, 0x30, 0xb4, 0x77, 0xcb, 0x2d, 0xa3, 0x80, 0x30, 0xf2, 0x0c, 0x6a, 0x42, 0xb7, 0x3b, 0xbe, 0xac, 0x01, 0xfa,
];

/// Hash of `input` under `key`. `key` must be at least 4 bytes longer than `input`.
pub fn toeplitz(key: &[u8], input: &[u8]) -> u32 {
    assert!(key.len() >= input.len() + 4, "Toeplitz key too short for {} input bytes", input.len());
    let mut window = u32::from_be_bytes([key[0], key[1], key[2], key[3]]);
    let mut next = 4;
    let mut out = 0u32;
    for &byte in input {
        for bit in (0..8).rev() {
            if byte >> bit & 1 == 1 {
                out ^= window;
            }
            // Slide the 32-bit key window left by one bit.
            let k = key[next];
            window = (window << 1) | ((k >> bit) & 1) as u32;
        }
        next += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn v4(src: &str, sport: u16, dst: &str, dport: u16) -> (Vec<u8>, Vec<u8>) {
        let mut ip = src.parse::<Ipv4Addr>().unwrap().octets().to_vec();
        ip.extend(dst.parse::<Ipv4Addr>().unwrap().octets());
        let mut l4 = ip.clone();
        l4.extend(sport.to_be_bytes());
        l4.extend(dport.to_be_bytes());
        (ip, l4)
    }

    // The standard RSS verification vectors for IPv4 (address-only and with ports).
    #[test]
    fn verification_suite() {
        let cases = [
            ("66.9.149.187", 2794, "161.142.100.80", 1766, 0x323e8fc2, 0x51ccc178),
            ("199.92.111.2", 14230, "65.69.140.83", 4739, 0xd718262a, 0xc626b0ea),
            ("24.19.198.95", 12898, "12.22.207.184", 38024, 0xd2d0a5de, 0x5c2b394a),
            ("38.27.205.30", 48228, "209.142.163.6", 2217, 0x82989176, 0xafc7327f),
            ("153.39.163.191", 44251, "202.188.127.2", 1303, 0x5d1809c5, 0x10e828a2),
        ];
        for (src, sp, dst, dp, ip_hash, l4_hash) in cases {
            let (ip, l4) = v4(src, sp, dst, dp);
            assert_eq!(toeplitz(&RSS_KEY, &ip), ip_hash, "{src} -> {dst}");
            assert_eq!(toeplitz(&RSS_KEY, &l4), l4_hash, "{src}:{sp} -> {dst}:{dp}");
        }
    }
}
