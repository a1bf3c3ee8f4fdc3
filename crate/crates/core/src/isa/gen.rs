//! Random well-formed programs for round-trip and fuzz testing.

use rand::Rng;

use super::*;

const PARAM_BYTES: usize = 2048;

fn bank(rng: &mut impl Rng, rows: usize) -> BankAddr {
    BankAddr { bank: rng.gen_range(1..=3), word: rng.gen_range(0..=(1024 - rows) as u16) }
}

fn bank_loc(rng: &mut impl Rng, len: u8) -> Loc {
    let a = bank(rng, 1);
    Loc::Bank { bank: a.bank, word: a.word, lane: rng.gen_range(0..=32 - len) }
}

fn reg_loc(rng: &mut impl Rng) -> Loc {
    Loc::Reg { word: rng.gen_range(0..32), lane: 0 }
}

/// Compute op number `kind % 4` of the target (NOP stands in for the fourth FPE slot).
pub fn random_compute(target: Target, kind: usize, rng: &mut impl Rng) -> ComputeOp {
    match (target, kind % 4) {
        (Target::Fpe, 0) => ComputeOp::Nop,
        (Target::Fpe, k) => {
            let (src, pbuf, acc) = (rng.gen_range(0..32), rng.gen_range(0..2), rng.gen_range(0..4));
            match k {
                1 => ComputeOp::Mv { src, pbuf, acc },
                2 => ComputeOp::Mva { src, pbuf, acc },
                _ => ComputeOp::Mvaa {
                    src,
                    pbuf,
                    acc,
                    table: rng.gen_range(0..4),
                    dst: rng.gen_range(0..32),
                    offset: rng.gen_range(0..4) * 8,
                },
            }
        }
        (Target::Hpe, 0) => {
            let rows = rng.gen_range(1..=32);
            let (src, dst) = (bank(rng, rows as usize), bank(rng, rows as usize));
            ComputeOp::Mm { src, rows, dst, acc: rng.gen_bool(0.5).then(|| bank(rng, rows as usize)) }
        }
        (Target::Hpe, k) => {
            let rows: u8 = rng.gen_range(1..=32);
            let pool = Pool { window: rng.gen_range(1..=rows.min(8)), stride: rng.gen_range(1..=8) };
            let out_rows = if k == 3 { (rows - pool.window) / pool.stride + 1 } else { rows };
            let m = MergeOp {
                a: bank(rng, rows as usize),
                b: rng.gen_bool(0.7).then(|| bank(rng, rows as usize)),
                dst: bank(rng, out_rows as usize),
                rows,
            };
            let (table, bias) = (rng.gen_range(0..4), rng.gen_bool(0.5));
            match k {
                1 => ComputeOp::Acc(m),
                2 => ComputeOp::Acca { m, table, bias },
                _ => ComputeOp::Accp { m, table, bias, pool },
            }
        }
    }
}

pub fn random_param(target: Target, rng: &mut impl Rng) -> ParamOp {
    if rng.gen_bool(0.4) {
        return ParamOp::Nop;
    }
    let (dst, rows, cols) = match target {
        Target::Fpe => {
            if rng.gen_bool(0.7) {
                (ParamDst::Pbuf(rng.gen_range(0..2)), rng.gen_range(1..=32), rng.gen_range(1..=8))
            } else {
                (ParamDst::Acc(rng.gen_range(0..4)), 1, rng.gen_range(1..=8))
            }
        }
        Target::Hpe => {
            if rng.gen_bool(0.7) {
                (ParamDst::Weights, rng.gen_range(1..=32), rng.gen_range(1..=32))
            } else {
                (ParamDst::Bias, 1, rng.gen_range(1..=32))
            }
        }
    };
    let span = rows as u32 * cols as u32;
    let mut addr = rng.gen_range(0..=PARAM_BYTES as u32 - span);
    if target == Target::Fpe {
        addr &= !7;
    }
    ParamOp::Ldp { addr, rows, cols, dst }
}

pub fn random_data(target: Target, rng: &mut impl Rng) -> DataOp {
    let len: u8 = rng.gen_range(1..=32);
    match (target, rng.gen_range(0..4)) {
        (_, 0) => DataOp::Nop,
        (Target::Fpe, 1 | 2) => DataOp::LdrInput { offset: rng.gen_range(0..2) * 32, len: 32, dst: reg_loc(rng) },
        (Target::Fpe, _) => DataOp::Str { src: reg_loc(rng), len, out: rng.gen_range(0..=32 - len) },
        (Target::Hpe, 1) => DataOp::LdrInput { offset: rng.gen_range(0..=64 - len), len, dst: bank_loc(rng, len) },
        (Target::Hpe, 2) => DataOp::LdrCopy { src: bank_loc(rng, len), len, dst: bank_loc(rng, len) },
        (Target::Hpe, _) => DataOp::Str { src: bank_loc(rng, len), len, out: rng.gen_range(0..=32 - len) },
    }
}

fn random_table(rng: &mut impl Rng) -> ActTable {
    match rng.gen_range(0..4) {
        0 => ActTable::identity(),
        1 => ActTable::relu(),
        2 => ActTable::sigmoid(),
        _ => {
            let mut b = [0u8; 256];
            rng.fill(&mut b[..]);
            ActTable::from_bytes(&b)
        }
    }
}

/// A program of `body` random bundles between `START` and `FIN` that passes
/// `validate` on the default configuration. Any four consecutive body bundles
/// cover every compute opcode of the target.
pub fn random_program(target: Target, body: usize, rng: &mut impl Rng) -> ProgramImage {
    let mut img = ProgramImage::new(target);
    let slots = |rng: &mut _, compute| VliwBundle { compute, param: random_param(target, rng), data: random_data(target, rng) };
    let start = ComputeOp::Start { input_len: rng.gen_range(0..=64) };
    img.bundles.push(slots(rng, start));
    let rot = rng.gen_range(0..4);
    for i in 0..body {
        let c = random_compute(target, i + rot, rng);
        img.bundles.push(slots(rng, c));
    }
    img.bundles.push(slots(rng, ComputeOp::Fin));
    img.param_image = (0..PARAM_BYTES).map(|_| rng.gen()).collect();
    for t in img.act_tables.iter_mut() {
        *t = random_table(rng);
    }
    img
}
