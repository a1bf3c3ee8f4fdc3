//! Text assembly.
//!
//! ```text
//! .target fpe
//! .table 1 relu
//! .param 0a0bff...
//! START 64
//! MVA r0, p0 -> acc0 | LDP @256, 32x8 -> p1 | LDR in+32, 32 -> r1
//! MVAA r1, p1, acc0, t1 -> r4.8
//! FIN | STR r4, 8 -> out+0
//! ```
//!
//! One bundle per line (or per `;`), slots separated by `|`, `#` starts a comment.
//! `MM b1:0, 32, b3:0 -> b2:0` adds the partial sums at `b3:0` to the tile product.
//! `MVAA acc0, t0 -> r1` is shorthand for `MVAA r0, p0, acc0, t0 -> r1.0`.
//! `START` without a length declares a full input buffer.

use std::fmt::Write as _;

use super::*;
use crate::fix8::ActKind;

const FULL_INPUT: u8 = 64;

struct Slot<'a> {
    text: &'a str,
    col: usize,
}

struct ParsedBundle {
    line: usize,
    bundle: VliwBundle,
    /// Mnemonics that are target-specific, with the target they require.
    needs: Vec<(String, Target)>,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IsaError {
    IsaError::Syntax { line, col, msg: msg.into() }
}

fn num(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let r = if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16)
    } else {
        s.parse()
    };
    r.map_err(|_| format!("expected a number, found `{s}`"))
}

fn small<T: TryFrom<u64>>(s: &str) -> Result<T, String> {
    T::try_from(num(s)?).map_err(|_| format!("`{}` is out of range", s.trim()))
}

fn prefixed<T: TryFrom<u64>>(s: &str, prefix: &str) -> Result<T, String> {
    let s = s.trim();
    match s.get(..prefix.len()) {
        Some(p) if p.eq_ignore_ascii_case(prefix) => small(&s[prefix.len()..]),
        _ => Err(format!("expected `{prefix}<n>`, found `{s}`")),
    }
}

fn bank_addr(s: &str) -> Result<BankAddr, String> {
    let s = s.trim();
    let (b, w) = s.split_once(':').ok_or_else(|| format!("expected `b<bank>:<word>`, found `{s}`"))?;
    Ok(BankAddr { bank: prefixed(b, "b")?, word: small(w)? })
}

fn operand_b(s: &str) -> Result<Option<BankAddr>, String> {
    if s.trim().eq_ignore_ascii_case("zero") {
        Ok(None)
    } else {
        bank_addr(s).map(Some)
    }
}

fn loc(s: &str) -> Result<Loc, String> {
    let s = s.trim();
    let (base, lane) = match s.split_once('.') {
        Some((b, l)) => (b, small(l)?),
        None => (s, 0),
    };
    if base.contains(':') {
        let a = bank_addr(base)?;
        Ok(Loc::Bank { bank: a.bank, word: a.word, lane })
    } else {
        Ok(Loc::Reg { word: prefixed(base, "r")?, lane })
    }
}

fn split_arrow(ops: &str) -> Result<(Vec<&str>, Vec<&str>), String> {
    let (l, r) = ops.split_once("->").ok_or("expected `->`")?;
    Ok((operand_list(l), operand_list(r)))
}

fn operand_list(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        Vec::new()
    } else {
        s.split(',').map(str::trim).collect()
    }
}

fn arity(v: &[&str], allowed: &[usize], what: &str) -> Result<(), String> {
    if allowed.contains(&v.len()) {
        Ok(())
    } else {
        Err(format!("wrong number of {what} operands"))
    }
}

enum SlotOp {
    Nop,
    Compute(ComputeOp),
    Param(ParamOp),
    Data(DataOp),
}

fn parse_slot(mnemonic: &str, ops: &str) -> Result<SlotOp, String> {
    let m = mnemonic.to_ascii_uppercase();
    let bare = |op: ComputeOp| {
        if ops.trim().is_empty() {
            Ok(SlotOp::Compute(op))
        } else {
            Err(format!("{m} takes no operands"))
        }
    };
    Ok(match m.as_str() {
        "NOP" => {
            if !ops.trim().is_empty() {
                return Err("NOP takes no operands".into());
            }
            SlotOp::Nop
        }
        "FIN" => bare(ComputeOp::Fin)?,
        "START" => {
            let input_len = if ops.trim().is_empty() { FULL_INPUT } else { small(ops)? };
            SlotOp::Compute(ComputeOp::Start { input_len })
        }
        "MV" | "MVA" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2], "source")?;
            arity(&r, &[1], "destination")?;
            let (src, pbuf, acc) = (prefixed(l[0], "r")?, prefixed(l[1], "p")?, prefixed(r[0], "acc")?);
            SlotOp::Compute(if m == "MV" {
                ComputeOp::Mv { src, pbuf, acc }
            } else {
                ComputeOp::Mva { src, pbuf, acc }
            })
        }
        "MVAA" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2, 4], "source")?;
            arity(&r, &[1], "destination")?;
            let (src, pbuf, rest) = if l.len() == 4 {
                (prefixed(l[0], "r")?, prefixed(l[1], "p")?, &l[2..])
            } else {
                (0, 0, &l[..])
            };
            let Loc::Reg { word: dst, lane: offset } = loc(r[0])? else {
                return Err("MVAA writes to a register".into());
            };
            SlotOp::Compute(ComputeOp::Mvaa {
                src,
                pbuf,
                acc: prefixed(rest[0], "acc")?,
                table: prefixed(rest[1], "t")?,
                dst,
                offset,
            })
        }
        "MM" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2, 3], "source")?;
            arity(&r, &[1], "destination")?;
            let acc = l.get(2).map(|a| bank_addr(a)).transpose()?;
            SlotOp::Compute(ComputeOp::Mm { src: bank_addr(l[0])?, rows: small(l[1])?, dst: bank_addr(r[0])?, acc })
        }
        "ACC" | "ACCA" | "ACCP" => {
            let (l, mut r) = split_arrow(ops)?;
            arity(&l, &[2], "source")?;
            let bias = r.last().is_some_and(|s| s.eq_ignore_ascii_case("bias"));
            if bias {
                r.pop();
            }
            let need = match m.as_str() {
                "ACC" => 2,
                "ACCA" => 3,
                _ => 4,
            };
            arity(&r, &[need], "destination")?;
            if bias && m == "ACC" {
                return Err("ACC takes no bias".into());
            }
            let mg = MergeOp { a: bank_addr(l[0])?, b: operand_b(l[1])?, dst: bank_addr(r[0])?, rows: small(r[1])? };
            match m.as_str() {
                "ACC" => SlotOp::Compute(ComputeOp::Acc(mg)),
                "ACCA" => SlotOp::Compute(ComputeOp::Acca { m: mg, table: prefixed(r[2], "t")?, bias }),
                _ => {
                    let p = r[3].trim();
                    let spec = p
                        .get(..4)
                        .filter(|k| k.eq_ignore_ascii_case("pool"))
                        .map(|_| p[4..].trim())
                        .ok_or("expected `pool <window>/<stride>`")?;
                    let (w, s) = spec.split_once('/').ok_or("expected `pool <window>/<stride>`")?;
                    let pool = Pool { window: small(w)?, stride: small(s)? };
                    SlotOp::Compute(ComputeOp::Accp { m: mg, table: prefixed(r[2], "t")?, bias, pool })
                }
            }
        }
        "LDP" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2], "source")?;
            arity(&r, &[1], "destination")?;
            let addr = prefixed(l[0], "@")?;
            let (rows, cols) = l[1].split_once(['x', 'X']).ok_or("expected `<rows>x<cols>`")?;
            let d = r[0].to_ascii_lowercase();
            let dst = match d.as_str() {
                "w" => ParamDst::Weights,
                "bias" => ParamDst::Bias,
                _ if d.starts_with("acc") => ParamDst::Acc(prefixed(&d, "acc")?),
                _ => ParamDst::Pbuf(prefixed(&d, "p")?),
            };
            SlotOp::Param(ParamOp::Ldp { addr, rows: small(rows)?, cols: small(cols)?, dst })
        }
        "LDR" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2], "source")?;
            arity(&r, &[1], "destination")?;
            let len = small(l[1])?;
            let dst = loc(r[0])?;
            let src = l[0];
            SlotOp::Data(match src.get(..3) {
                Some(p) if p.eq_ignore_ascii_case("in+") => DataOp::LdrInput { offset: small(&src[3..])?, len, dst },
                _ => DataOp::LdrCopy { src: loc(src)?, len, dst },
            })
        }
        "STR" => {
            let (l, r) = split_arrow(ops)?;
            arity(&l, &[2], "source")?;
            arity(&r, &[1], "destination")?;
            SlotOp::Data(DataOp::Str { src: loc(l[0])?, len: small(l[1])?, out: prefixed(r[0], "out+")? })
        }
        _ => return Err(format!("unknown mnemonic `{mnemonic}`")),
    })
}

fn loc_target(l: Loc) -> Target {
    match l {
        Loc::Reg { .. } => Target::Fpe,
        Loc::Bank { .. } => Target::Hpe,
    }
}

fn needs(slot: &SlotOp) -> Vec<(String, Target)> {
    let mut v = Vec::new();
    match slot {
        SlotOp::Compute(c) => {
            if let Some(t) = c.target() {
                v.push((c.mnemonic().to_string(), t));
            }
        }
        SlotOp::Param(ParamOp::Ldp { dst, .. }) => {
            let t = match dst {
                ParamDst::Pbuf(_) | ParamDst::Acc(_) => Target::Fpe,
                ParamDst::Weights | ParamDst::Bias => Target::Hpe,
            };
            v.push(("LDP".into(), t));
        }
        SlotOp::Data(d) => match *d {
            DataOp::LdrInput { dst, .. } => v.push(("LDR".into(), loc_target(dst))),
            DataOp::LdrCopy { src, dst, .. } => {
                v.push(("LDR".into(), Target::Hpe));
                v.push(("LDR".into(), loc_target(src)));
                v.push(("LDR".into(), loc_target(dst)));
            }
            DataOp::Str { src, .. } => v.push(("STR".into(), loc_target(src))),
            DataOp::Nop => {}
        },
        _ => {}
    }
    v
}

fn parse_bundle(line: usize, slots: &[Slot]) -> Result<ParsedBundle, IsaError> {
    let mut b = VliwBundle::default();
    let mut seen = [false; 3];
    let mut all_needs = Vec::new();
    for s in slots {
        let t = s.text.trim_start();
        let col = s.col + (s.text.len() - t.len());
        let t = t.trim_end();
        if t.is_empty() {
            continue;
        }
        let (mn, ops) = t.split_once(char::is_whitespace).unwrap_or((t, ""));
        let op = parse_slot(mn, ops).map_err(|m| syntax(line, col, m))?;
        let idx = match op {
            SlotOp::Nop => continue,
            SlotOp::Compute(_) => 0,
            SlotOp::Param(_) => 1,
            SlotOp::Data(_) => 2,
        };
        if std::mem::replace(&mut seen[idx], true) {
            return Err(syntax(line, col, "two instructions for the same slot"));
        }
        all_needs.extend(needs(&op));
        match op {
            SlotOp::Compute(c) => b.compute = c,
            SlotOp::Param(p) => b.param = p,
            SlotOp::Data(d) => b.data = d,
            SlotOp::Nop => {}
        }
    }
    Ok(ParsedBundle { line, bundle: b, needs: all_needs })
}

fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    let digits: Vec<u8> = s.bytes().filter(|c| !c.is_ascii_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return Err("odd number of hex digits".into());
    }
    digits
        .chunks(2)
        .map(|p| {
            let p = std::str::from_utf8(p).map_err(|_| "non-ASCII hex".to_string())?;
            u8::from_str_radix(p, 16).map_err(|_| format!("bad hex byte `{p}`"))
        })
        .collect()
}

fn parse_table(spec: &str) -> Result<ActTable, String> {
    match spec.parse::<ActKind>() {
        Ok(ActKind::Custom) | Err(_) => {
            let bytes = parse_hex(spec)?;
            let arr: [u8; 256] = bytes.try_into().map_err(|_| "a custom table needs 256 bytes".to_string())?;
            Ok(ActTable::from_bytes(&arr))
        }
        Ok(kind) => ActTable::build(kind).map_err(|e| e.to_string()),
    }
}

/// Assembles source text. `default_target` applies when the source has no `.target`
/// directive; without either, the target is inferred from the first target-specific
/// instruction, falling back to FPE.
pub fn assemble(text: &str, default_target: Option<Target>) -> Result<ProgramImage, IsaError> {
    let mut target: Option<Target> = None;
    let mut tables: [ActTable; ACT_TABLE_SLOTS] = Default::default();
    let mut params = Vec::new();
    let mut parsed = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = raw.split('#').next().unwrap_or("");
        let trimmed = body.trim_start();
        let indent = body.len() - trimmed.len();
        if let Some(dir) = trimmed.strip_prefix('.') {
            let dir = dir.trim_end();
            let (name, arg) = dir.split_once(char::is_whitespace).unwrap_or((dir, ""));
            let arg = arg.trim();
            let err = |m: String| syntax(line, indent + 1, m);
            match name {
                "target" => {
                    if target.is_some() || !parsed.is_empty() {
                        return Err(err(".target must come first and only once".into()));
                    }
                    target = Some(arg.parse().map_err(|e: IsaError| err(e.to_string()))?);
                }
                "param" => params.extend(parse_hex(arg).map_err(err)?),
                "table" => {
                    let (id, spec) = arg.split_once(char::is_whitespace).ok_or_else(|| err("expected `.table <id> <kind>`".into()))?;
                    let id: usize = small(id).map_err(err)?;
                    if id >= ACT_TABLE_SLOTS {
                        return Err(err(format!("table id {id} out of range")));
                    }
                    tables[id] = parse_table(spec.trim()).map_err(err)?;
                }
                other => return Err(err(format!("unknown directive `.{other}`"))),
            }
            continue;
        }
        let mut start = 0;
        for seg in body.split(';') {
            let seg_col = start + 1;
            start += seg.len() + 1;
            if seg.trim().is_empty() {
                continue;
            }
            let mut slots = Vec::new();
            let mut off = 0;
            for s in seg.split('|') {
                slots.push(Slot { text: s, col: seg_col + off });
                off += s.len() + 1;
            }
            parsed.push(parse_bundle(line, &slots)?);
        }
    }

    let target = target
        .or(default_target)
        .or_else(|| parsed.iter().flat_map(|p| p.needs.first()).map(|n| n.1).next())
        .unwrap_or(Target::Fpe);
    for p in &parsed {
        if let Some((mn, _)) = p.needs.iter().find(|(_, t)| *t != target) {
            return Err(IsaError::TargetMismatch { line: p.line, mnemonic: mn.clone(), target });
        }
    }
    for p in &parsed {
        encode_bundle(target, &p.bundle).map_err(|e| syntax(p.line, 1, e.to_string()))?;
    }

    let img = ProgramImage { target, bundles: parsed.iter().map(|p| p.bundle).collect(), param_image: params, act_tables: tables };
    let icache = target.default_icache_bytes();
    if img.code_bytes() > icache {
        return Err(IsaError::Capacity { resource: "iCache", used: img.code_bytes(), capacity: icache });
    }
    let pcache = target.default_pcache_bytes();
    if img.param_image.len() > pcache {
        return Err(IsaError::Capacity { resource: "pCache", used: img.param_image.len(), capacity: pcache });
    }
    match img.bundles.iter().position(|b| b.compute == ComputeOp::Fin) {
        None => Err(IsaError::MissingFin),
        Some(i) if i + 1 < img.bundles.len() => Err(IsaError::AfterFin(i + 1)),
        Some(_) => Ok(img),
    }
}

fn fmt_compute(op: &ComputeOp) -> String {
    match *op {
        ComputeOp::Nop => "NOP".into(),
        ComputeOp::Start { input_len } => format!("START {input_len}"),
        ComputeOp::Fin => "FIN".into(),
        ComputeOp::Mv { src, pbuf, acc } => format!("MV r{src}, p{pbuf} -> acc{acc}"),
        ComputeOp::Mva { src, pbuf, acc } => format!("MVA r{src}, p{pbuf} -> acc{acc}"),
        ComputeOp::Mvaa { src, pbuf, acc, table, dst, offset } => {
            format!("MVAA r{src}, p{pbuf}, acc{acc}, t{table} -> r{dst}.{offset}")
        }
        ComputeOp::Mm { src, rows, dst, acc: None } => format!("MM {src}, {rows} -> {dst}"),
        ComputeOp::Mm { src, rows, dst, acc: Some(a) } => format!("MM {src}, {rows}, {a} -> {dst}"),
        ComputeOp::Acc(m) | ComputeOp::Acca { m, .. } | ComputeOp::Accp { m, .. } => {
            let b = m.b.map_or("zero".to_string(), |b| b.to_string());
            let mut s = format!("{} {}, {b} -> {}, {}", op.mnemonic(), m.a, m.dst, m.rows);
            match *op {
                ComputeOp::Acca { table, bias, .. } => {
                    let _ = write!(s, ", t{table}{}", if bias { ", bias" } else { "" });
                }
                ComputeOp::Accp { table, bias, pool, .. } => {
                    let _ = write!(s, ", t{table}, pool {}/{}{}", pool.window, pool.stride, if bias { ", bias" } else { "" });
                }
                _ => {}
            }
            s
        }
    }
}

fn fmt_param(op: &ParamOp) -> Option<String> {
    match *op {
        ParamOp::Nop => None,
        ParamOp::Ldp { addr, rows, cols, dst } => {
            let d = match dst {
                ParamDst::Pbuf(p) => format!("p{p}"),
                ParamDst::Acc(g) => format!("acc{g}"),
                ParamDst::Weights => "w".into(),
                ParamDst::Bias => "bias".into(),
            };
            Some(format!("LDP @{addr}, {rows}x{cols} -> {d}"))
        }
    }
}

fn fmt_data(op: &DataOp) -> Option<String> {
    match *op {
        DataOp::Nop => None,
        DataOp::LdrInput { offset, len, dst } => Some(format!("LDR in+{offset}, {len} -> {dst}")),
        DataOp::LdrCopy { src, len, dst } => Some(format!("LDR {src}, {len} -> {dst}")),
        DataOp::Str { src, len, out } => Some(format!("STR {src}, {len} -> out+{out}")),
    }
}

pub fn format_bundle(b: &VliwBundle) -> String {
    let mut s = fmt_compute(&b.compute);
    for extra in [fmt_param(&b.param), fmt_data(&b.data)].into_iter().flatten() {
        s.push_str(" | ");
        s.push_str(&extra);
    }
    s
}

/// Canonical source text; `assemble(disassemble(img))` reproduces `img`.
pub fn disassemble(img: &ProgramImage) -> String {
    let mut s = format!(".target {}\n", img.target);
    for (i, t) in img.act_tables.iter().enumerate() {
        match t.kind() {
            ActKind::Identity => {}
            ActKind::Custom => {
                let hex: String = t.to_bytes().iter().map(|b| format!("{b:02x}")).collect();
                let _ = writeln!(s, ".table {i} {hex}");
            }
            k => {
                let _ = writeln!(s, ".table {i} {}", k.name());
            }
        }
    }
    for chunk in img.param_image.chunks(32) {
        let hex: String = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(s, ".param {hex}");
    }
    for b in &img.bundles {
        s.push_str(&format_bundle(b));
        s.push('\n');
    }
    s
}
