//! Static checks of a program image against a PE configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::*;
use crate::fpe::FpeConfig;
use crate::hpe::HpeConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "lowercase")]
pub enum PeConfig {
    Fpe(FpeConfig),
    Hpe(HpeConfig),
}

impl PeConfig {
    pub fn default_for(target: Target) -> Self {
        match target {
            Target::Fpe => PeConfig::Fpe(FpeConfig::default()),
            Target::Hpe => PeConfig::Hpe(HpeConfig::default()),
        }
    }

    pub fn target(&self) -> Target {
        match self {
            PeConfig::Fpe(_) => Target::Fpe,
            PeConfig::Hpe(_) => Target::Hpe,
        }
    }

    pub fn icache_bytes(&self) -> usize {
        match self {
            PeConfig::Fpe(c) => c.icache_bytes,
            PeConfig::Hpe(c) => c.icache_bytes,
        }
    }

    pub fn pcache_bytes(&self) -> usize {
        match self {
            PeConfig::Fpe(c) => c.pcache_bytes,
            PeConfig::Hpe(c) => c.pcache_bytes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagKind {
    Capacity,
    Bounds,
    Placement,
    SlotLegality,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub bundle: Option<usize>,
    pub msg: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bundle {
            Some(i) => write!(f, "bundle {i}: {:?}: {}", self.kind, self.msg),
            None => write!(f, "{:?}: {}", self.kind, self.msg),
        }
    }
}

struct Checker {
    out: Vec<Diagnostic>,
    at: Option<usize>,
}

impl Checker {
    fn push(&mut self, kind: DiagKind, msg: String) {
        self.out.push(Diagnostic { kind, bundle: self.at, msg });
    }

    fn bound(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.push(DiagKind::Bounds, msg());
        }
    }
}

/// Returns every rule the image breaks; an empty list means the program is loadable.
pub fn validate(img: &ProgramImage, cfg: &PeConfig) -> Vec<Diagnostic> {
    let mut c = Checker { out: Vec::new(), at: None };
    if img.target != cfg.target() {
        c.push(
            DiagKind::SlotLegality,
            format!("{} program checked against a {} configuration", img.target, cfg.target()),
        );
        return c.out;
    }
    if img.code_bytes() > cfg.icache_bytes() {
        c.push(DiagKind::Capacity, format!("code {} B exceeds iCache {} B", img.code_bytes(), cfg.icache_bytes()));
    }
    if img.param_image.len() > cfg.pcache_bytes() {
        c.push(
            DiagKind::Capacity,
            format!("parameters {} B exceed pCache {} B", img.param_image.len(), cfg.pcache_bytes()),
        );
    }
    match img.bundles.iter().position(|b| b.compute == ComputeOp::Fin) {
        None => c.push(DiagKind::Placement, "program has no FIN".into()),
        Some(i) if i + 1 != img.bundles.len() => {
            c.at = Some(i + 1);
            c.push(DiagKind::Placement, "instruction after FIN".into());
        }
        _ => {}
    }
    for (i, b) in img.bundles.iter().enumerate() {
        c.at = Some(i);
        if matches!(b.compute, ComputeOp::Start { .. }) && i != 0 {
            c.push(DiagKind::Placement, "START outside the first bundle".into());
        }
        if let Some(t) = b.compute.target() {
            if t != img.target {
                c.push(DiagKind::SlotLegality, format!("{} is not a {} instruction", b.compute.mnemonic(), img.target));
                continue;
            }
        }
        match cfg {
            PeConfig::Fpe(f) => check_fpe(&mut c, f, b, img.param_image.len()),
            PeConfig::Hpe(h) => check_hpe(&mut c, h, b, img.param_image.len()),
        }
    }
    c.out
}

fn check_table(c: &mut Checker, table: u8) {
    c.bound((table as usize) < ACT_TABLE_SLOTS, || format!("activation table t{table} does not exist"));
}

fn check_ldp(c: &mut Checker, addr: u32, rows: u8, cols: u8, pcache: usize, image: usize) {
    let end = addr as usize + rows as usize * cols as usize;
    c.bound(end <= pcache, || format!("LDP reads [{addr}, {end}) beyond pCache {pcache} B"));
    c.bound(end <= image, || format!("LDP reads [{addr}, {end}) beyond the parameter image ({image} B)"));
}

fn check_fpe(c: &mut Checker, f: &FpeConfig, b: &VliwBundle, image: usize) {
    let reg = |c: &mut Checker, r: u8, what: &str| {
        c.bound((r as usize) < f.regfile_words, || format!("{what} r{r} beyond regfile depth {}", f.regfile_words));
    };
    match b.compute {
        ComputeOp::Start { input_len } => {
            c.bound(input_len as usize <= f.input_bytes, || format!("START {input_len} exceeds input buffer"));
        }
        ComputeOp::Mv { src, pbuf, acc } | ComputeOp::Mva { src, pbuf, acc } | ComputeOp::Mvaa { src, pbuf, acc, .. } => {
            reg(c, src, "source");
            c.bound((pbuf as usize) < f.param_buffers, || format!("parameter buffer p{pbuf} does not exist"));
            c.bound((acc as usize) < f.acc_groups, || format!("accumulator acc{acc} does not exist"));
            if let ComputeOp::Mvaa { table, dst, offset, .. } = b.compute {
                check_table(c, table);
                reg(c, dst, "destination");
                c.bound(offset as usize + f.t <= f.word_len(), || format!("MVAA writes past lane {}", f.word_len()));
            }
        }
        _ => {}
    }
    if let ParamOp::Ldp { addr, rows, cols, dst } = b.param {
        match dst {
            ParamDst::Pbuf(p) => {
                c.bound((p as usize) < f.param_buffers, || format!("parameter buffer p{p} does not exist"));
                c.bound(rows as usize <= f.word_len(), || format!("LDP block has {rows} rows, buffer holds {}", f.word_len()));
            }
            ParamDst::Acc(g) => {
                c.bound((g as usize) < f.acc_groups, || format!("accumulator acc{g} does not exist"));
                c.bound(rows == 1, || "bias preload must be a single row".into());
            }
            ParamDst::Weights | ParamDst::Bias => {
                c.push(DiagKind::SlotLegality, format!("LDP destination {dst:?} is HPE-only"));
            }
        }
        c.bound(cols as usize <= f.t, || format!("LDP block has {cols} columns, limit {}", f.t));
        check_ldp(c, addr, rows, cols, f.pcache_bytes, image);
    }
    let lanes = f.word_len();
    let fpe_loc = |c: &mut Checker, l: Loc, len: u8| match l {
        Loc::Reg { word, lane } => {
            reg(c, word, "data");
            c.bound(lane as usize + len as usize <= lanes, || format!("{len} elements from lane {lane} cross a word"));
        }
        Loc::Bank { .. } => c.push(DiagKind::SlotLegality, format!("bank location {l} in an FPE program")),
    };
    match b.data {
        DataOp::Nop => {}
        DataOp::LdrInput { offset, len, dst } => {
            c.bound(offset as usize + len as usize <= f.input_bytes, || "LDR reads past input buffer".to_string());
            fpe_loc(c, dst, len);
        }
        DataOp::LdrCopy { .. } => c.push(DiagKind::SlotLegality, "regfile copy is not available on the FPE".into()),
        DataOp::Str { src, len, out } => {
            fpe_loc(c, src, len);
            c.bound(out as usize + len as usize <= f.output_len, || "STR writes past output buffer".to_string());
        }
    }
}

fn check_hpe(c: &mut Checker, h: &HpeConfig, b: &VliwBundle, image: usize) {
    let words = h.bank_words;
    let span = |c: &mut Checker, a: BankAddr, rows: usize| {
        c.bound(a.bank >= 1 && a.bank as usize <= h.bank_count, || format!("bank {} does not exist", a.bank));
        c.bound(a.word as usize + rows <= words, || format!("{rows} rows from {a} run past bank depth {words}"));
    };
    let dim = h.array_dim;
    match b.compute {
        ComputeOp::Start { input_len } => {
            c.bound(input_len as usize <= h.input_bytes, || format!("START {input_len} exceeds input buffer"));
        }
        ComputeOp::Mm { src, rows, dst, acc } => {
            c.bound(rows as usize <= dim, || format!("MM tile of {rows} rows exceeds {dim}"));
            span(c, src, rows as usize);
            span(c, dst, rows as usize);
            if let Some(a) = acc {
                span(c, a, rows as usize);
            }
        }
        ComputeOp::Acc(m) | ComputeOp::Acca { m, .. } | ComputeOp::Accp { m, .. } => {
            c.bound(m.rows as usize <= dim, || format!("merge of {} rows exceeds {dim}", m.rows));
            span(c, m.a, m.rows as usize);
            if let Some(bb) = m.b {
                span(c, bb, m.rows as usize);
            }
            let mut out_rows = m.rows as usize;
            match b.compute {
                ComputeOp::Acca { table, .. } => check_table(c, table),
                ComputeOp::Accp { table, pool, .. } => {
                    check_table(c, table);
                    c.bound(pool.window >= 1 && pool.stride >= 1, || "pool window and stride must be positive".into());
                    c.bound(m.rows >= pool.window, || format!("pool window {} exceeds {} rows", pool.window, m.rows));
                    if pool.stride >= 1 && m.rows >= pool.window {
                        out_rows = (m.rows - pool.window) as usize / pool.stride as usize + 1;
                    }
                }
                _ => {}
            }
            span(c, m.dst, out_rows);
        }
        _ => {}
    }
    if let ParamOp::Ldp { addr, rows, cols, dst } = b.param {
        match dst {
            ParamDst::Weights => {}
            ParamDst::Bias => c.bound(rows == 1, || "bias staging takes a single row".into()),
            _ => c.push(DiagKind::SlotLegality, format!("LDP destination {dst:?} is FPE-only")),
        }
        c.bound(rows as usize <= dim && cols as usize <= dim, || format!("LDP block {rows}x{cols} exceeds {dim}x{dim}"));
        check_ldp(c, addr, rows, cols, h.pcache_bytes, image);
    }
    let hpe_loc = |c: &mut Checker, l: Loc, len: u8| match l {
        Loc::Bank { bank, word, lane } => {
            span(c, BankAddr { bank, word }, 1);
            c.bound(lane as usize + len as usize <= dim, || format!("{len} elements from lane {lane} cross a word"));
        }
        Loc::Reg { .. } => c.push(DiagKind::SlotLegality, format!("register location {l} in an HPE program")),
    };
    match b.data {
        DataOp::Nop => {}
        DataOp::LdrInput { offset, len, dst } => {
            c.bound(offset as usize + len as usize <= h.input_bytes, || "LDR reads past input buffer".to_string());
            hpe_loc(c, dst, len);
        }
        DataOp::LdrCopy { src, len, dst } => {
            hpe_loc(c, src, len);
            hpe_loc(c, dst, len);
        }
        DataOp::Str { src, len, out } => {
            hpe_loc(c, src, len);
            c.bound(out as usize + len as usize <= h.output_len, || "STR writes past output buffer".to_string());
        }
    }
}
