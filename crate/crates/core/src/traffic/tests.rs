use super::*;

fn tuple(i: u32, protocol: u8) -> FiveTuple {
    FiveTuple {
        src_ip: Ipv4Addr::from(0x0a00_0000 + i),
        dst_ip: Ipv4Addr::new(192, 168, 1, 1),
        src_port: 1000 + i as u16,
        dst_port: 443,
        protocol,
    }
}

#[test]
fn tcp_payload_layout() {
    let t = tuple(1, PROTO_TCP);
    let payload: Vec<u8> = (0..100).collect();
    let f = build_frame(&t, &payload);
    let p = parse_packet(&f, 7, f.len() as u32).unwrap();
    assert_eq!(p.tuple, t);
    assert_eq!(&p.raw_input[..5], &[0x03, 0xe9, 0x01, 0xbb, 6]);
    assert_eq!(&p.raw_input[5..], &payload[..59]);
    assert_eq!(p.input(32), &p.raw_input[..32]);
    assert_eq!(&p.input(32)[5..], &payload[..27]);
}

#[test]
fn short_udp_payload_is_zero_padded() {
    let t = tuple(2, PROTO_UDP);
    let f = build_frame(&t, &[7; 10]);
    let p = parse_packet(&f, 0, 0).unwrap();
    assert_eq!(p.raw_input[4], PROTO_UDP);
    assert_eq!(&p.raw_input[5..15], &[7; 10]);
    assert!(p.raw_input[15..].iter().all(|&b| b == 0));
}

#[test]
fn skips() {
    let mut arp = vec![0u8; 42];
    arp[12] = 0x08;
    arp[13] = 0x06;
    assert_eq!(parse_packet(&arp, 0, 42), Err(Skip::NotIpv4));
    let f = build_frame(&tuple(3, PROTO_TCP), &[1; 30]);
    assert_eq!(parse_packet(&f[..30], 0, 0), Err(Skip::Truncated));
    assert_eq!(parse_packet(&f[..5], 0, 0), Err(Skip::Truncated));
    let mut v6 = f.clone();
    v6[14] = 0x60;
    assert_eq!(parse_packet(&v6, 0, 0), Err(Skip::NotIpv4));
}

#[test]
fn truncated_capture_keeps_available_payload() {
    let f = build_frame(&tuple(4, PROTO_TCP), &[5; 1000]);
    let p = parse_packet(&f[..80], 0, f.len() as u32).unwrap();
    assert_eq!(p.wire_len as usize, f.len());
    assert_eq!(&p.raw_input[5..31], &[5; 26]);
    assert_eq!(p.raw_input[31], 0);
}

#[test]
fn vlan_tag_is_skipped() {
    let f = build_frame(&tuple(5, PROTO_UDP), &[1, 2, 3]);
    let mut tagged = f[..12].to_vec();
    tagged.extend([0x81, 0x00, 0x00, 0x05]);
    tagged.extend(&f[12..]);
    assert_eq!(parse_packet(&tagged, 0, 0).unwrap().tuple, tuple(5, PROTO_UDP));
}

#[test]
fn hash_is_deterministic_and_ignores_protocol() {
    assert_eq!(tuple(9, PROTO_TCP).flow_hash(), tuple(9, PROTO_TCP).flow_hash());
    assert_eq!(tuple(9, PROTO_TCP).flow_hash(), tuple(9, PROTO_UDP).flow_hash());
    assert_ne!(tuple(9, PROTO_TCP).flow_hash(), tuple(10, PROTO_TCP).flow_hash());
}

#[test]
fn monitor_threshold_semantics() {
    let mut ft = FlowTable::new(16);
    let h = tuple(1, PROTO_TCP).flow_hash();
    let d: Vec<Dispatch> = (0..20).map(|_| ft.update(h)).collect();
    assert_eq!(d[0], Dispatch::Fast);
    assert_eq!(d[15], Dispatch::Slow);
    assert_eq!(d.iter().filter(|x| **x == Dispatch::Fast).count(), 1);
    assert_eq!(d.iter().filter(|x| **x == Dispatch::Slow).count(), 1);
    assert_eq!(ft.get(h).unwrap().packet_count, 20);

    let mut ft = FlowTable::new(16);
    let fast = (0..16).filter(|i| ft.update(tuple(100 + i, PROTO_UDP).flow_hash()) == Dispatch::Fast).count();
    assert_eq!(fast, 16);
}

#[test]
fn index_collision_is_counted_and_both_flows_served() {
    // Search for two tuples sharing a table index.
    let mut seen = std::collections::HashMap::new();
    let (a, b) = (0..)
        .find_map(|i| {
            let t = tuple(i, PROTO_TCP);
            let idx = table_index(t.flow_hash());
            seen.insert(idx, t).map(|prev| (prev, t))
        })
        .unwrap();
    assert_ne!(a.flow_hash(), b.flow_hash());
    let mut ft = FlowTable::new(16);
    assert_eq!(ft.update(a.flow_hash()), Dispatch::Fast);
    assert_eq!(ft.update(b.flow_hash()), Dispatch::Fast);
    assert_eq!(ft.collisions, 1);
    assert!(ft.get(a.flow_hash()).is_none());
}

#[test]
fn query_table_rules() {
    let mut qt = QueryTable::default();
    let t = tuple(1, PROTO_TCP);
    let h = t.flow_hash();
    assert_eq!(qt.query(&t), (None, 5));
    let fast = QueryEntry { key_hash: h, label: 1, source: Path::Fast, result_cycle: 10 };
    let slow = QueryEntry { key_hash: h, label: 2, source: Path::Slow, result_cycle: 20 };
    assert!(qt.write(fast));
    assert_eq!(qt.query(&t).0.unwrap().label, 1);
    assert!(qt.write(slow));
    assert!(!qt.write(QueryEntry { result_cycle: 30, ..fast }));
    assert_eq!(qt.query(&t), (Some(slow), 5));
    assert!((query_charge_ns() - 15.5).abs() <= 0.1);
}

#[test]
fn fifo_accounting() {
    let mut q = Fifo::new(3);
    let pushed = (0..5).filter(|i| q.push(*i)).count();
    assert_eq!((pushed, q.enqueued, q.dropped, q.len()), (3, 3, 2, 3));
    assert_eq!(q.pop(), Some(0));
    assert!(q.push(9));
    assert_eq!(q.enqueued + q.dropped, 6);
}
