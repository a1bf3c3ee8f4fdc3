use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gen::random_program;
use super::*;
use crate::fix8::ActKind;

fn fpe_cfg() -> PeConfig {
    PeConfig::default_for(Target::Fpe)
}

#[test]
fn four_bundle_example() {
    let img = assemble("START; MV r0, p0 -> acc0; MVAA acc0, t0 -> r1; FIN", None).unwrap();
    assert_eq!(img.target, Target::Fpe);
    assert_eq!(img.bundles.len(), 4);
    assert_eq!(img.bundles[0].compute, ComputeOp::Start { input_len: 64 });
    assert_eq!(
        img.bundles[2].compute,
        ComputeOp::Mvaa { src: 0, pbuf: 0, acc: 0, table: 0, dst: 1, offset: 0 }
    );
    assert_eq!(img.bundles[3].compute, ComputeOp::Fin);
}

#[test]
fn oversize_fpe_program_overflows_icache() {
    let src = "NOP\n".repeat(2047) + "FIN\n";
    match assemble(&src, Some(Target::Fpe)) {
        Err(IsaError::Capacity { resource: "iCache", used, capacity }) => {
            assert_eq!(used, 2048 * 8);
            assert_eq!(capacity, 1024);
        }
        other => panic!("expected capacity error, got {other:?}"),
    }
    // 128 bundles of 8 bytes fill 1 KiB exactly.
    let src = "NOP\n".repeat(127) + "FIN\n";
    assert_eq!(assemble(&src, Some(Target::Fpe)).unwrap().code_bytes(), 1024);
}

#[test]
fn target_mismatch() {
    let err = assemble(".target fpe\nSTART\nMM b1:0, 4 -> b2:0\nFIN", None).unwrap_err();
    assert_eq!(err, IsaError::TargetMismatch { line: 3, mnemonic: "MM".into(), target: Target::Fpe });
    let err = assemble("MVA r0, p0 -> acc0\nFIN", Some(Target::Hpe)).unwrap_err();
    assert!(matches!(err, IsaError::TargetMismatch { line: 1, .. }));
    let err = assemble(".target fpe\nLDR b1:0.0, 4 -> b1:1.0\nFIN", None).unwrap_err();
    assert!(matches!(err, IsaError::TargetMismatch { .. }));
}

#[test]
fn fin_placement_errors() {
    assert_eq!(assemble("START\nMV r0, p0 -> acc0", None).unwrap_err(), IsaError::MissingFin);
    assert_eq!(assemble("START\nFIN\nNOP", None).unwrap_err(), IsaError::AfterFin(2));
}

#[test]
fn syntax_errors_carry_position() {
    match assemble("START\nFIN | BOGUS 3", None).unwrap_err() {
        IsaError::Syntax { line, col, .. } => assert_eq!((line, col), (2, 7)),
        e => panic!("{e:?}"),
    }
    match assemble("  MV r0 p0 -> acc0\nFIN", None).unwrap_err() {
        IsaError::Syntax { line, col, .. } => assert_eq!((line, col), (1, 3)),
        e => panic!("{e:?}"),
    }
    assert!(matches!(assemble("MV r0, p0 -> acc0 | MVA r1, p0 -> acc1\nFIN", None), Err(IsaError::Syntax { .. })));
    // Encodable range is checked at assembly time.
    assert!(matches!(assemble("MVAA r0, p0, acc0, t0 -> r1.4\nFIN", None), Err(IsaError::Syntax { .. })));
}

#[test]
fn fin_only_disassembles_to_fin() {
    let img = assemble("FIN", None).unwrap();
    let text = disassemble(&img);
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('.')).collect();
    assert_eq!(body, ["FIN"]);
    assert_eq!(assemble(&text, None).unwrap(), img);
}

#[test]
fn directives_and_comments() {
    let src = "# header\n.target hpe\n.table 2 sigmoid\n.param 0102\n.param ff\nSTART 32 # go\nNOP\nFIN";
    let img = assemble(src, None).unwrap();
    assert_eq!(img.target, Target::Hpe);
    assert_eq!(img.param_image, vec![1, 2, 0xff]);
    assert_eq!(img.act_tables[2].kind(), ActKind::Sigmoid);
    assert_eq!(img.act_tables[0].kind(), ActKind::Identity);
    assert_eq!(img.bundles.len(), 3);
    assert!(img.bundles[1].is_nop());
}

#[test]
fn full_syntax_sample() {
    let src = "\
.target hpe
START 64 | LDP @0, 32x16 -> w | LDR in+0, 32 -> b1:0.0
MM b1:0, 32 -> b2:0 | LDP @512, 1x16 -> bias | LDR b1:0.4, 8 -> b1:1.0
ACC b2:0, zero -> b3:0, 32
ACCA b2:0, b3:0 -> b1:64, 32, t1, bias
ACCP b2:0, b3:0 -> b1:128, 32, t1, pool 2/2 | NOP | STR b1:128.0, 16 -> out+0
FIN";
    let img = assemble(src, None).unwrap();
    assert_eq!(
        img.bundles[4].compute,
        ComputeOp::Accp {
            m: MergeOp { a: BankAddr::new(2, 0), b: Some(BankAddr::new(3, 0)), dst: BankAddr::new(1, 128), rows: 32 },
            table: 1,
            bias: false,
            pool: Pool { window: 2, stride: 2 },
        }
    );
    let text = disassemble(&img);
    assert_eq!(assemble(&text, None).unwrap(), img);
    assert_eq!(disassemble(&assemble(&text, None).unwrap()), text);
}

#[test]
fn binary_header_errors() {
    let img = assemble(".param 00112233\nSTART\nFIN", None).unwrap();
    let bytes = encode_binary(&img).unwrap();
    assert_eq!(&bytes[..4], b"KPRG");
    assert_eq!(bytes.len(), 4 + 1 + 1 + 4 + 2 * 8 + 4 + 4 + 1024);
    assert_eq!(decode_binary(&bytes).unwrap(), img);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert_eq!(decode_binary(&bad).unwrap_err(), IsaError::BadMagic);

    let mut v2 = bytes.clone();
    v2[4] = 9;
    assert_eq!(decode_binary(&v2).unwrap_err(), IsaError::Version(9));

    // Cut inside the parameter image.
    let cut = 4 + 1 + 1 + 4 + 16 + 4 + 2;
    assert_eq!(decode_binary(&bytes[..cut]).unwrap_err(), IsaError::Truncated("param image"));
    assert!(matches!(decode_binary(&bytes[..bytes.len() - 1]), Err(IsaError::Truncated(_))));
}

#[test]
fn corrupt_bundle_is_rejected() {
    let img = assemble("START\nFIN", None).unwrap();
    let mut bytes = encode_binary(&img).unwrap();
    // Compute opcode 15 does not exist.
    bytes[10] = 0x0f;
    assert!(matches!(decode_binary(&bytes), Err(IsaError::Corrupt { bundle: 0, .. })));
    // Stray bits in an unused region.
    let mut bytes = encode_binary(&img).unwrap();
    bytes[25] |= 0x80;
    assert!(matches!(decode_binary(&bytes), Err(IsaError::Corrupt { bundle: 1, .. })));
}

#[test]
fn validate_examples() {
    let ok = assemble("START 64 | LDR in+0, 32 -> r0\nMV r0, p0 -> acc0\nFIN", None).unwrap();
    assert!(validate(&ok, &fpe_cfg()).is_empty());

    // LDR beyond regfile depth 32.
    let mut img = ok.clone();
    img.bundles[0].data = DataOp::LdrInput { offset: 0, len: 32, dst: Loc::Reg { word: 32, lane: 0 } };
    let d = validate(&img, &fpe_cfg());
    assert_eq!(d.len(), 1);
    assert_eq!((d[0].kind, d[0].bundle), (DiagKind::Bounds, Some(0)));

    // Instruction after FIN.
    let mut img = ok.clone();
    img.bundles.push(VliwBundle::default());
    let d = validate(&img, &fpe_cfg());
    assert_eq!(d.len(), 1);
    assert_eq!((d[0].kind, d[0].bundle), (DiagKind::Placement, Some(3)));

    // Slot legality and START placement.
    let mut img = ok.clone();
    img.bundles[1].compute = ComputeOp::Acc(MergeOp { a: BankAddr::new(1, 0), b: None, dst: BankAddr::new(1, 0), rows: 1 });
    img.bundles.insert(1, VliwBundle::compute(ComputeOp::Start { input_len: 1 }));
    let kinds: Vec<DiagKind> = validate(&img, &fpe_cfg()).iter().map(|d| d.kind).collect();
    assert_eq!(kinds, [DiagKind::Placement, DiagKind::SlotLegality]);

    // LDP past the parameter image and pCache.
    let mut img = ok.clone();
    img.bundles[1].param = ParamOp::Ldp { addr: 8184, rows: 32, cols: 8, dst: ParamDst::Pbuf(0) };
    let d = validate(&img, &fpe_cfg());
    assert!(d.iter().all(|d| d.kind == DiagKind::Bounds) && d.len() == 2);

    // Oversize parameter image.
    let mut img = ok;
    img.param_image = vec![0; 8193];
    assert_eq!(validate(&img, &fpe_cfg())[0].kind, DiagKind::Capacity);
}

#[test]
fn generated_programs_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for target in [Target::Fpe, Target::Hpe] {
        for _ in 0..50 {
            let img = random_program(target, 40, &mut rng);
            let d = validate(&img, &PeConfig::default_for(target));
            assert!(d.is_empty(), "{target}: {:?}", d);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn text_and_binary_round_trip(seed in any::<u64>(), hpe in any::<bool>(), body in 0usize..100) {
        let target = if hpe { Target::Hpe } else { Target::Fpe };
        let img = random_program(target, body, &mut ChaCha8Rng::seed_from_u64(seed));
        let text = disassemble(&img);
        prop_assert_eq!(&assemble(&text, None).unwrap(), &img);
        let bytes = encode_binary(&img).unwrap();
        prop_assert_eq!(&decode_binary(&bytes).unwrap(), &img);
        prop_assert_eq!(encode_binary(&decode_binary(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 16)) {
        for target in [Target::Fpe, Target::Hpe] {
            let w = target.bundle_bytes();
            if let Ok(b) = decode_bundle(target, &bytes[..w], 0) {
                prop_assert_eq!(encode_bundle(target, &b).unwrap(), bytes[..w].to_vec());
            }
        }
    }
}
