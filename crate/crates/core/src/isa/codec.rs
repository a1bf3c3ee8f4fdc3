//! Fixed-width bundle encoding and the `KPRG` program file.
//!
//! FPE bundles are 64-bit words: compute `[0,21)`, param `[21,46)`, data `[46,64)`.
//! HPE bundles are 128-bit words: compute `[0,56)`, param `[56,87)`, data `[87,128)`.
//! Each slot starts with its opcode in the low bits. FPE parameter addresses are
//! stored in 8-byte units. Counts that are never zero
//! (rows, cols, lengths, pool window/stride) are stored minus one.

use super::*;

const C_NOP: u128 = 0;
const C_START: u128 = 1;
const C_FIN: u128 = 2;
const C_MV: u128 = 3;
const C_MVA: u128 = 4;
const C_MVAA: u128 = 5;
const C_MM: u128 = 6;
const C_ACC: u128 = 7;
const C_ACCA: u128 = 8;
const C_ACCP: u128 = 9;

const D_NOP: u128 = 0;
const D_LDR_IN: u128 = 1;
const D_LDR_COPY: u128 = 2;
const D_STR: u128 = 3;

struct Layout {
    compute: (u32, u32),
    param: (u32, u32),
    data: (u32, u32),
}

fn layout(target: Target) -> Layout {
    match target {
        Target::Fpe => Layout { compute: (0, 21), param: (21, 25), data: (46, 18) },
        Target::Hpe => Layout { compute: (0, 56), param: (56, 31), data: (87, 41) },
    }
}

#[derive(Default)]
struct Packer {
    value: u128,
    pos: u32,
    limit: u32,
}

impl Packer {
    fn new(limit: u32) -> Self {
        Packer { value: 0, pos: 0, limit }
    }

    fn put(&mut self, v: u128, bits: u32, what: &str) -> Result<(), IsaError> {
        if bits < 128 && v >> bits != 0 {
            return Err(IsaError::Range(format!("{what}={v} needs more than {bits} bits")));
        }
        if self.pos + bits > self.limit {
            return Err(IsaError::Range(format!("slot overflow packing {what}")));
        }
        self.value |= v << self.pos;
        self.pos += bits;
        Ok(())
    }

    fn count(&mut self, v: u8, bits: u32, what: &str) -> Result<(), IsaError> {
        if v == 0 {
            return Err(IsaError::Range(format!("{what} must be at least 1")));
        }
        self.put(v as u128 - 1, bits, what)
    }
}

struct Unpacker {
    value: u128,
    pos: u32,
}

impl Unpacker {
    fn get(&mut self, bits: u32) -> u128 {
        let v = (self.value >> self.pos) & ((1u128 << bits) - 1);
        self.pos += bits;
        v
    }

    fn count(&mut self, bits: u32) -> u8 {
        self.get(bits) as u8 + 1
    }
}

fn put_bank(p: &mut Packer, a: Option<BankAddr>) -> Result<(), IsaError> {
    match a {
        None => {
            p.put(0, 2, "bank")?;
            p.put(0, 10, "word")
        }
        Some(a) => {
            if a.bank == 0 {
                return Err(IsaError::Range("bank 0 does not exist".into()));
            }
            p.put(a.bank as u128, 2, "bank")?;
            p.put(a.word as u128, 10, "word")
        }
    }
}

fn get_bank(u: &mut Unpacker) -> Option<BankAddr> {
    let bank = u.get(2) as u8;
    let word = u.get(10) as u16;
    (bank != 0).then_some(BankAddr { bank, word })
}

fn put_bank_loc(p: &mut Packer, l: Loc) -> Result<(), IsaError> {
    match l {
        Loc::Bank { bank, word, lane } => {
            put_bank(p, Some(BankAddr { bank, word }))?;
            p.put(lane as u128, 5, "lane")
        }
        Loc::Reg { .. } => Err(IsaError::Range("register location in an HPE program".into())),
    }
}

fn get_bank_loc(u: &mut Unpacker) -> Result<Loc, String> {
    let a = get_bank(u).ok_or("bank 0 in data location")?;
    let lane = u.get(5) as u8;
    Ok(Loc::Bank { bank: a.bank, word: a.word, lane })
}

fn fpe_reg(l: Loc, what: &str) -> Result<u8, IsaError> {
    match l {
        Loc::Reg { word, lane: 0 } => Ok(word),
        _ => Err(IsaError::Range(format!("FPE {what} must be a whole regfile word"))),
    }
}

fn encode_compute(target: Target, op: &ComputeOp, bits: u32) -> Result<u128, IsaError> {
    let mut p = Packer::new(bits);
    match (target, op) {
        (_, ComputeOp::Nop) => p.put(C_NOP, 4, "op")?,
        (_, ComputeOp::Start { input_len }) => {
            p.put(C_START, 4, "op")?;
            p.put(*input_len as u128, 7, "input_len")?;
        }
        (_, ComputeOp::Fin) => p.put(C_FIN, 4, "op")?,
        (Target::Fpe, ComputeOp::Mv { src, pbuf, acc } | ComputeOp::Mva { src, pbuf, acc }) => {
            let code = if matches!(op, ComputeOp::Mv { .. }) { C_MV } else { C_MVA };
            p.put(code, 4, "op")?;
            p.put(*src as u128, 5, "src")?;
            p.put(*pbuf as u128, 1, "pbuf")?;
            p.put(*acc as u128, 2, "acc")?;
        }
        (Target::Fpe, ComputeOp::Mvaa { src, pbuf, acc, table, dst, offset }) => {
            p.put(C_MVAA, 4, "op")?;
            p.put(*src as u128, 5, "src")?;
            p.put(*pbuf as u128, 1, "pbuf")?;
            p.put(*acc as u128, 2, "acc")?;
            p.put(*table as u128, 2, "table")?;
            p.put(*dst as u128, 5, "dst")?;
            if offset % 8 != 0 {
                return Err(IsaError::Range(format!("MVAA offset {offset} is not a multiple of 8")));
            }
            p.put(*offset as u128 / 8, 2, "offset")?;
        }
        (Target::Hpe, ComputeOp::Mm { src, rows, dst, acc }) => {
            p.put(C_MM, 4, "op")?;
            put_bank(&mut p, Some(*src))?;
            p.count(*rows, 5, "rows")?;
            put_bank(&mut p, Some(*dst))?;
            put_bank(&mut p, *acc)?;
        }
        (Target::Hpe, ComputeOp::Acc(m) | ComputeOp::Acca { m, .. } | ComputeOp::Accp { m, .. }) => {
            let (code, table, bias, pool) = match op {
                ComputeOp::Acc(_) => (C_ACC, 0, false, Pool { window: 1, stride: 1 }),
                ComputeOp::Acca { table, bias, .. } => (C_ACCA, *table, *bias, Pool { window: 1, stride: 1 }),
                ComputeOp::Accp { table, bias, pool, .. } => (C_ACCP, *table, *bias, *pool),
                _ => unreachable!(),
            };
            p.put(code, 4, "op")?;
            put_bank(&mut p, Some(m.a))?;
            put_bank(&mut p, m.b)?;
            put_bank(&mut p, Some(m.dst))?;
            p.count(m.rows, 5, "rows")?;
            p.put(table as u128, 2, "table")?;
            p.put(bias as u128, 1, "bias")?;
            p.count(pool.window, 3, "pool window")?;
            p.count(pool.stride, 3, "pool stride")?;
        }
        (t, op) => {
            return Err(IsaError::Range(format!("{} cannot be encoded for {t}", op.mnemonic())));
        }
    }
    Ok(p.value)
}

fn decode_compute(target: Target, value: u128) -> Result<ComputeOp, String> {
    let mut u = Unpacker { value, pos: 0 };
    let code = u.get(4);
    Ok(match (target, code) {
        (_, C_NOP) => ComputeOp::Nop,
        (_, C_START) => ComputeOp::Start { input_len: u.get(7) as u8 },
        (_, C_FIN) => ComputeOp::Fin,
        (Target::Fpe, C_MV | C_MVA) => {
            let (src, pbuf, acc) = (u.get(5) as u8, u.get(1) as u8, u.get(2) as u8);
            if code == C_MV {
                ComputeOp::Mv { src, pbuf, acc }
            } else {
                ComputeOp::Mva { src, pbuf, acc }
            }
        }
        (Target::Fpe, C_MVAA) => ComputeOp::Mvaa {
            src: u.get(5) as u8,
            pbuf: u.get(1) as u8,
            acc: u.get(2) as u8,
            table: u.get(2) as u8,
            dst: u.get(5) as u8,
            offset: u.get(2) as u8 * 8,
        },
        (Target::Hpe, C_MM) => {
            let src = get_bank(&mut u).ok_or("MM source in bank 0")?;
            let rows = u.count(5);
            let dst = get_bank(&mut u).ok_or("MM destination in bank 0")?;
            ComputeOp::Mm { src, rows, dst, acc: get_bank(&mut u) }
        }
        (Target::Hpe, C_ACC | C_ACCA | C_ACCP) => {
            let a = get_bank(&mut u).ok_or("merge operand in bank 0")?;
            let b = get_bank(&mut u);
            let dst = get_bank(&mut u).ok_or("merge destination in bank 0")?;
            let rows = u.count(5);
            let table = u.get(2) as u8;
            let bias = u.get(1) == 1;
            let pool = Pool { window: u.count(3), stride: u.count(3) };
            let m = MergeOp { a, b, dst, rows };
            match code {
                C_ACC => ComputeOp::Acc(m),
                C_ACCA => ComputeOp::Acca { m, table, bias },
                _ => ComputeOp::Accp { m, table, bias, pool },
            }
        }
        (_, c) => return Err(format!("invalid compute opcode {c}")),
    })
}

fn encode_param(target: Target, op: &ParamOp, bits: u32) -> Result<u128, IsaError> {
    let mut p = Packer::new(bits);
    match op {
        ParamOp::Nop => p.put(0, 1, "op")?,
        ParamOp::Ldp { addr, rows, cols, dst } => {
            p.put(1, 1, "op")?;
            match target {
                Target::Fpe => {
                    let d = match dst {
                        ParamDst::Pbuf(b) if *b < 2 => *b as u128,
                        ParamDst::Acc(g) if *g < 4 => 4 + *g as u128,
                        other => return Err(IsaError::Range(format!("FPE LDP destination {other:?}"))),
                    };
                    p.put(d, 3, "dst")?;
                    if addr % 8 != 0 {
                        return Err(IsaError::Range(format!("FPE LDP address {addr} is not 8-byte aligned")));
                    }
                    p.put(*addr as u128 / 8, 13, "addr")?;
                    p.count(*rows, 5, "rows")?;
                    p.count(*cols, 3, "cols")?;
                }
                Target::Hpe => {
                    let d = match dst {
                        ParamDst::Weights => 0,
                        ParamDst::Bias => 1,
                        other => return Err(IsaError::Range(format!("HPE LDP destination {other:?}"))),
                    };
                    p.put(d, 1, "dst")?;
                    p.put(*addr as u128, 19, "addr")?;
                    p.count(*rows, 5, "rows")?;
                    p.count(*cols, 5, "cols")?;
                }
            }
        }
    }
    Ok(p.value)
}

fn decode_param(target: Target, value: u128) -> Result<ParamOp, String> {
    let mut u = Unpacker { value, pos: 0 };
    if u.get(1) == 0 {
        return Ok(ParamOp::Nop);
    }
    Ok(match target {
        Target::Fpe => {
            let d = u.get(3) as u8;
            let dst = match d {
                0 | 1 => ParamDst::Pbuf(d),
                4..=7 => ParamDst::Acc(d - 4),
                _ => return Err(format!("invalid LDP destination {d}")),
            };
            ParamOp::Ldp { dst, addr: u.get(13) as u32 * 8, rows: u.count(5), cols: u.count(3) }
        }
        Target::Hpe => {
            let dst = if u.get(1) == 0 { ParamDst::Weights } else { ParamDst::Bias };
            ParamOp::Ldp { dst, addr: u.get(19) as u32, rows: u.count(5), cols: u.count(5) }
        }
    })
}

fn encode_data(target: Target, op: &DataOp, bits: u32) -> Result<u128, IsaError> {
    let mut p = Packer::new(bits);
    match (target, op) {
        (_, DataOp::Nop) => p.put(D_NOP, 2, "op")?,
        (Target::Fpe, DataOp::LdrInput { offset, len, dst }) => {
            if offset % 32 != 0 || *len != 32 {
                return Err(IsaError::Range("FPE LDR moves whole 32-byte input words".into()));
            }
            p.put(D_LDR_IN, 2, "op")?;
            p.put(*offset as u128 / 32, 1, "input word")?;
            p.put(fpe_reg(*dst, "LDR destination")? as u128, 5, "reg")?;
        }
        (Target::Fpe, DataOp::Str { src, len, out }) => {
            p.put(D_STR, 2, "op")?;
            p.put(fpe_reg(*src, "STR source")? as u128, 5, "reg")?;
            p.count(*len, 5, "len")?;
            p.put(*out as u128, 5, "out")?;
        }
        (Target::Hpe, DataOp::LdrInput { offset, len, dst }) => {
            p.put(D_LDR_IN, 2, "op")?;
            p.put(*offset as u128, 7, "offset")?;
            p.count(*len, 5, "len")?;
            put_bank_loc(&mut p, *dst)?;
        }
        (Target::Hpe, DataOp::LdrCopy { src, len, dst }) => {
            p.put(D_LDR_COPY, 2, "op")?;
            put_bank_loc(&mut p, *src)?;
            p.count(*len, 5, "len")?;
            put_bank_loc(&mut p, *dst)?;
        }
        (Target::Hpe, DataOp::Str { src, len, out }) => {
            p.put(D_STR, 2, "op")?;
            put_bank_loc(&mut p, *src)?;
            p.count(*len, 5, "len")?;
            p.put(*out as u128, 5, "out")?;
        }
        (t, op) => return Err(IsaError::Range(format!("{op:?} cannot be encoded for {t}"))),
    }
    Ok(p.value)
}

fn decode_data(target: Target, value: u128) -> Result<DataOp, String> {
    let mut u = Unpacker { value, pos: 0 };
    let code = u.get(2);
    Ok(match (target, code) {
        (_, D_NOP) => DataOp::Nop,
        (Target::Fpe, D_LDR_IN) => {
            let offset = u.get(1) as u8 * 32;
            DataOp::LdrInput { offset, len: 32, dst: Loc::Reg { word: u.get(5) as u8, lane: 0 } }
        }
        (Target::Fpe, D_STR) => {
            let src = Loc::Reg { word: u.get(5) as u8, lane: 0 };
            DataOp::Str { src, len: u.count(5), out: u.get(5) as u8 }
        }
        (Target::Hpe, D_LDR_IN) => {
            let offset = u.get(7) as u8;
            let len = u.count(5);
            DataOp::LdrInput { offset, len, dst: get_bank_loc(&mut u)? }
        }
        (Target::Hpe, D_LDR_COPY) => {
            let src = get_bank_loc(&mut u)?;
            let len = u.count(5);
            DataOp::LdrCopy { src, len, dst: get_bank_loc(&mut u)? }
        }
        (Target::Hpe, D_STR) => {
            let src = get_bank_loc(&mut u)?;
            DataOp::Str { src, len: u.count(5), out: u.get(5) as u8 }
        }
        (_, c) => return Err(format!("invalid data opcode {c}")),
    })
}

/// Encodes one bundle into `target.bundle_bytes()` little-endian bytes.
pub fn encode_bundle(target: Target, b: &VliwBundle) -> Result<Vec<u8>, IsaError> {
    let l = layout(target);
    let word = encode_compute(target, &b.compute, l.compute.1)? << l.compute.0
        | encode_param(target, &b.param, l.param.1)? << l.param.0
        | encode_data(target, &b.data, l.data.1)? << l.data.0;
    Ok(word.to_le_bytes()[..target.bundle_bytes()].to_vec())
}

/// Decodes one bundle. Any bit pattern that does not re-encode to itself is corrupt.
pub fn decode_bundle(target: Target, bytes: &[u8], index: usize) -> Result<VliwBundle, IsaError> {
    let mut raw = [0u8; 16];
    raw[..bytes.len()].copy_from_slice(bytes);
    let word = u128::from_le_bytes(raw);
    let l = layout(target);
    let field = |(pos, bits): (u32, u32)| (word >> pos) & ((1u128 << bits) - 1);
    let corrupt = |msg: String| IsaError::Corrupt { bundle: index, msg };
    let b = VliwBundle {
        compute: decode_compute(target, field(l.compute)).map_err(corrupt)?,
        param: decode_param(target, field(l.param)).map_err(corrupt)?,
        data: decode_data(target, field(l.data)).map_err(corrupt)?,
    };
    let again = encode_bundle(target, &b).map_err(|e| corrupt(e.to_string()))?;
    if again != bytes {
        return Err(corrupt("non-canonical bit pattern".into()));
    }
    Ok(b)
}

/// `KPRG` file: magic, u8 version, u8 target, u32 bundle count, bundles,
/// u32 param length, param bytes, 4 x 256 activation table bytes.
pub fn encode_binary(img: &ProgramImage) -> Result<Vec<u8>, IsaError> {
    let mut out = Vec::with_capacity(14 + img.code_bytes() + img.param_image.len() + 1024);
    out.extend_from_slice(PROGRAM_MAGIC);
    out.push(PROGRAM_VERSION);
    out.push(match img.target {
        Target::Fpe => 0,
        Target::Hpe => 1,
    });
    out.extend_from_slice(&(img.bundles.len() as u32).to_le_bytes());
    for b in &img.bundles {
        out.extend(encode_bundle(img.target, b)?);
    }
    out.extend_from_slice(&(img.param_image.len() as u32).to_le_bytes());
    out.extend_from_slice(&img.param_image);
    for t in &img.act_tables {
        out.extend_from_slice(&t.to_bytes());
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<ProgramImage, IsaError> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], IsaError> {
        if cur.len() < n {
            return Err(IsaError::Truncated(what));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4, "header")? != PROGRAM_MAGIC {
        return Err(IsaError::BadMagic);
    }
    let version = take(1, "header")?[0];
    if version != PROGRAM_VERSION {
        return Err(IsaError::Version(version));
    }
    let target = match take(1, "header")?[0] {
        0 => Target::Fpe,
        1 => Target::Hpe,
        t => return Err(IsaError::UnknownTarget(t.to_string())),
    };
    let count = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    let width = target.bundle_bytes();
    let code = take(count.checked_mul(width).ok_or(IsaError::Truncated("bundles"))?, "bundles")?;
    let bundles = code
        .chunks(width)
        .enumerate()
        .map(|(i, c)| decode_bundle(target, c, i))
        .collect::<Result<Vec<_>, _>>()?;
    let plen = u32::from_le_bytes(take(4, "param length")?.try_into().unwrap()) as usize;
    let param_image = take(plen, "param image")?.to_vec();
    let mut act_tables: [ActTable; ACT_TABLE_SLOTS] = Default::default();
    for t in act_tables.iter_mut() {
        *t = ActTable::from_bytes(take(256, "activation tables")?.try_into().unwrap());
    }
    if !cur.is_empty() {
        return Err(IsaError::Corrupt { bundle: count, msg: format!("{} trailing bytes", cur.len()) });
    }
    Ok(ProgramImage { target, bundles, param_image, act_tables })
}
