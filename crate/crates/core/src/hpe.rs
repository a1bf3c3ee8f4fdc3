//! Heavy Process Element: weight-stationary systolic array with three dual-port banks.
//!
//! Bank words hold 32 lanes. Lanes carry either Fix8 activations or WideAcc partial
//! sums, so the model stores every lane as an `i32`.
//!
//! Timing is a scoreboard over three units (array, accumulator, data mover).
//! Bundles issue in order, one per cycle at most, once their unit is free and
//! their operands are ready. Each bank access is booked on a (bank, cycle) port
//! table; a bundle that would overbook a bank waits, and the wait is reported as
//! stall cycles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocked::Fix8Matrix;
use crate::fix8::{Fix8, WideAcc};
use crate::isa::{self, BankAddr, ComputeOp, DataOp, Loc, MergeOp, ParamDst, ParamOp, PeConfig, ProgramImage, Target};
use crate::pe::{Fault, PeError, RunResult};

pub const LANES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpeConfig {
    pub array_dim: usize,
    pub bank_count: usize,
    pub bank_words: usize,
    pub ports_per_bank: u8,
    pub pcache_bytes: usize,
    pub icache_bytes: usize,
    pub weight_preload_cycles: u64,
    pub drain_cycles: u64,
    pub input_bytes: usize,
    pub output_len: usize,
}

impl Default for HpeConfig {
    fn default() -> Self {
        HpeConfig {
            array_dim: 32,
            bank_count: 3,
            bank_words: 1024,
            ports_per_bank: 2,
            pcache_bytes: 512 * 1024,
            icache_bytes: 8 * 1024,
            weight_preload_cycles: 32,
            drain_cycles: 6,
            input_bytes: 64,
            output_len: 32,
        }
    }
}

impl HpeConfig {
    /// Latency of one MM over `rows` source words: preload, skewed feed and drain.
    pub fn mm_cycles(&self, rows: usize) -> u64 {
        self.weight_preload_cycles + rows as u64 + 2 * self.array_dim as u64 - 1
    }
}

/// Product of a `(l, n)` tile with an `(n, n)` weight tile and its latency.
pub fn mm_tile(src: &[Vec<Fix8>], weights: &Fix8Matrix, cfg: &HpeConfig) -> (Vec<Vec<WideAcc>>, u64) {
    let n = cfg.array_dim;
    let out = src
        .iter()
        .map(|row| (0..n).map(|c| (0..n).map(|k| row.get(k).copied().unwrap_or(Fix8::ZERO).mul(weights.get_padded(k, c))).sum()).collect())
        .collect();
    (out, cfg.mm_cycles(src.len()))
}

/// Largest element of a pooling window.
pub fn maxpool(window: &[Fix8]) -> Option<Fix8> {
    window.iter().copied().max()
}

#[derive(Default)]
struct Units {
    array: u64,
    acc: u64,
    mover: u64,
}

/// Cycle bookkeeping shared by the simulator and the timing-only predictor.
pub(crate) struct Timing {
    ports: u8,
    words: usize,
    preload: u64,
    dim: u64,
    drain: u64,
    next_issue: u64,
    units: Units,
    weights_ready: u64,
    bias_ready: u64,
    ready: Vec<u64>,
    last_read: Vec<u64>,
    usage: BTreeMap<(u64, u8), u8>,
    horizon: u64,
    pub stall_cycles: u64,
    pub finished: Option<u64>,
}

#[derive(Clone, Copy)]
enum Access {
    Read(BankAddr),
    Write(BankAddr),
}

impl Timing {
    pub fn new(cfg: &HpeConfig) -> Self {
        let n = cfg.bank_count * cfg.bank_words;
        Timing {
            ports: cfg.ports_per_bank,
            words: cfg.bank_words,
            preload: cfg.weight_preload_cycles,
            dim: cfg.array_dim as u64,
            drain: cfg.drain_cycles,
            next_issue: 0,
            units: Units::default(),
            weights_ready: 0,
            bias_ready: 0,
            ready: vec![0; n],
            last_read: vec![0; n],
            usage: BTreeMap::new(),
            horizon: 0,
            stall_cycles: 0,
            finished: None,
        }
    }

    fn idx(&self, a: BankAddr) -> usize {
        (a.bank as usize - 1) * self.words + a.word as usize
    }

    fn at(a: BankAddr, r: usize) -> BankAddr {
        BankAddr { bank: a.bank, word: a.word + r as u16 }
    }

    /// Earliest issue allowed by operand readiness for accesses at `s + offset`.
    fn operand_floor(&self, accesses: &[(u64, Access)]) -> u64 {
        let mut floor = 0;
        for &(off, acc) in accesses {
            let need = match acc {
                Access::Read(a) => self.ready[self.idx(a)],
                Access::Write(a) => self.ready[self.idx(a)].max(self.last_read[self.idx(a)]),
            };
            floor = floor.max(need.saturating_sub(off));
        }
        floor
    }

    fn fits(&self, s: u64, accesses: &[(u64, Access)]) -> bool {
        let mut extra: BTreeMap<(u64, u8), u8> = BTreeMap::new();
        for &(off, acc) in accesses {
            let bank = match acc {
                Access::Read(a) | Access::Write(a) => a.bank,
            };
            *extra.entry((s + off, bank)).or_default() += 1;
        }
        extra.iter().all(|(k, n)| self.usage.get(k).copied().unwrap_or(0) + n <= self.ports)
    }

    /// Finds the first cycle at or after `floor` whose port bookings fit; waits count as stalls.
    fn place(&mut self, floor: u64, accesses: &[(u64, Access)]) -> u64 {
        let mut s = floor;
        while !self.fits(s, accesses) {
            s += 1;
            self.stall_cycles += 1;
        }
        s
    }

    fn book(&mut self, s: u64, accesses: &[(u64, Access)], done: u64) {
        for &(off, acc) in accesses {
            let t = s + off;
            match acc {
                Access::Read(a) => {
                    let i = self.idx(a);
                    self.last_read[i] = self.last_read[i].max(t);
                    *self.usage.entry((t, a.bank)).or_default() += 1;
                }
                Access::Write(a) => {
                    let i = self.idx(a);
                    self.ready[i] = done;
                    *self.usage.entry((t, a.bank)).or_default() += 1;
                }
            }
        }
        self.horizon = self.horizon.max(done);
    }

    fn merge_accesses(&self, m: &MergeOp, pool: Option<isa::Pool>) -> (Vec<(u64, Access)>, u64) {
        let rows = m.rows as usize;
        let mut per_row: Vec<Vec<Access>> = (0..rows)
            .map(|r| {
                let mut v = vec![Access::Read(Self::at(m.a, r))];
                if let Some(b) = m.b {
                    v.push(Access::Read(Self::at(b, r)));
                }
                v
            })
            .collect();
        match pool {
            None => (0..rows).for_each(|r| per_row[r].push(Access::Write(Self::at(m.dst, r)))),
            Some(p) => {
                let (w, st) = (p.window as usize, p.stride as usize);
                for q in 0..=(rows - w) / st {
                    per_row[q * st + w - 1].push(Access::Write(Self::at(m.dst, q)));
                }
            }
        }
        // A row that needs more accesses to one bank than it has ports takes extra cycles.
        let ports = self.ports as usize;
        let cpr = per_row
            .iter()
            .map(|v| {
                (1..=3u8)
                    .map(|b| v.iter().filter(|a| matches!(a, Access::Read(x) | Access::Write(x) if x.bank == b)).count())
                    .max()
                    .unwrap_or(0)
                    .div_ceil(ports)
                    .max(1)
            })
            .max()
            .unwrap_or(1) as u64;
        let mut out = Vec::new();
        for (r, v) in per_row.iter().enumerate() {
            let mut seen = [0usize; 4];
            for a in v {
                let (Access::Read(x) | Access::Write(x)) = *a;
                let slot = seen[x.bank as usize] / ports;
                seen[x.bank as usize] += 1;
                out.push((r as u64 * cpr + slot as u64, *a));
            }
        }
        (out, cpr)
    }

    /// Books one bundle and returns its issue cycle.
    pub fn issue(&mut self, b: &isa::VliwBundle) -> u64 {
        let mut s = self.next_issue;
        let mut compute: Vec<(u64, Access)> = Vec::new();
        let mut done = 0;
        match b.compute {
            ComputeOp::Fin => {
                s = s.max(self.horizon).max(self.units.array).max(self.units.acc).max(self.units.mover);
            }
            ComputeOp::Mm { src, rows, dst, acc } => {
                let l = rows as usize;
                let feed = self.preload;
                let lag = feed + 2 * self.dim - 2;
                for r in 0..l {
                    compute.push((feed + r as u64, Access::Read(Self::at(src, r))));
                    if let Some(a) = acc {
                        compute.push((lag + r as u64, Access::Read(Self::at(a, r))));
                    }
                    compute.push((lag + r as u64, Access::Write(Self::at(dst, r))));
                }
                s = s.max(self.units.array).max(self.weights_ready);
                done = feed + l as u64 + 2 * self.dim - 1;
            }
            ComputeOp::Acc(m) | ComputeOp::Acca { m, .. } | ComputeOp::Accp { m, .. } => {
                let pool = match b.compute {
                    ComputeOp::Accp { pool, .. } => Some(pool),
                    _ => None,
                };
                let bias = matches!(b.compute, ComputeOp::Acca { bias: true, .. } | ComputeOp::Accp { bias: true, .. });
                let (acc, cpr) = self.merge_accesses(&m, pool);
                compute = acc;
                s = s.max(self.units.acc);
                if bias {
                    s = s.max(self.bias_ready);
                }
                done = m.rows as u64 * cpr;
                self.stall_cycles += m.rows as u64 * (cpr - 1);
            }
            _ => {}
        }
        s = s.max(self.operand_floor(&compute));
        let s = self.place(s, &compute);
        if !compute.is_empty() {
            self.book(s, &compute, s + done);
            match b.compute {
                ComputeOp::Mm { .. } => self.units.array = s + done,
                _ => self.units.acc = s + done,
            }
        }

        match b.param {
            ParamOp::Ldp { dst: ParamDst::Weights, .. } => self.weights_ready = s + 1,
            ParamOp::Ldp { .. } => self.bias_ready = s + 1,
            ParamOp::Nop => {}
        }

        let data: Vec<(u64, Access)> = match b.data {
            DataOp::Nop => Vec::new(),
            DataOp::LdrInput { dst, .. } => vec![(0, Access::Write(loc_addr(dst)))],
            DataOp::LdrCopy { src, dst, .. } => vec![(0, Access::Read(loc_addr(src))), (0, Access::Write(loc_addr(dst)))],
            DataOp::Str { src, .. } => vec![(0, Access::Read(loc_addr(src)))],
        };
        if !data.is_empty() {
            let floor = s.max(self.units.mover).max(self.operand_floor(&data));
            let d = self.place(floor, &data);
            self.book(d, &data, d + 1);
            self.units.mover = d + 1;
        }

        if b.compute == ComputeOp::Fin {
            self.finished = Some(s + self.drain);
        }
        self.usage = self.usage.split_off(&(s, 0));
        self.next_issue = s + 1;
        s
    }

    /// Accesses booked on each bank at cycle `t`.
    fn port_use(&self, t: u64) -> [u8; 3] {
        [1, 2, 3].map(|b| self.usage.get(&(t, b)).copied().unwrap_or(0))
    }
}

fn loc_addr(l: Loc) -> BankAddr {
    match l {
        Loc::Bank { bank, word, .. } => BankAddr { bank, word },
        Loc::Reg { .. } => unreachable!("validated HPE program"),
    }
}

/// Cycle count and stall cycles of a program without executing its arithmetic.
pub fn predict_cycles(img: &ProgramImage, cfg: &HpeConfig) -> (u64, u64) {
    let mut t = Timing::new(cfg);
    for b in &img.bundles {
        t.issue(b);
        if t.finished.is_some() {
            break;
        }
    }
    (t.finished.unwrap_or(0), t.stall_cycles)
}

pub struct HpeSim {
    cfg: HpeConfig,
    img: ProgramImage,
    banks: Vec<i32>,
    weights: Vec<Fix8>,
    bias: Vec<Fix8>,
    input: Vec<Fix8>,
    output: Vec<Fix8>,
    out_len: usize,
    timing: Timing,
    pc: usize,
    halted: bool,
    trace: Option<Vec<String>>,
}

impl HpeSim {
    pub fn load(img: &ProgramImage, cfg: &HpeConfig) -> Result<Self, PeError> {
        if img.target != Target::Hpe {
            return Err(PeError::WrongTarget { expected: Target::Hpe, found: img.target });
        }
        let diags = isa::validate(img, &PeConfig::Hpe(cfg.clone()));
        if !diags.is_empty() {
            return Err(PeError::Invalid(diags));
        }
        let n = cfg.array_dim;
        Ok(HpeSim {
            cfg: cfg.clone(),
            img: img.clone(),
            banks: vec![0; cfg.bank_count * cfg.bank_words * LANES],
            weights: vec![Fix8::ZERO; n * n],
            bias: vec![Fix8::ZERO; n],
            input: vec![Fix8::ZERO; cfg.input_bytes],
            output: vec![Fix8::ZERO; cfg.output_len],
            out_len: 0,
            timing: Timing::new(cfg),
            pc: 0,
            halted: false,
            trace: None,
        })
    }

    pub fn config(&self) -> &HpeConfig {
        &self.cfg
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn input_len(&self) -> usize {
        self.img.input_len().unwrap_or(self.cfg.input_bytes)
    }

    /// Lanes of one bank word.
    pub fn word(&self, a: BankAddr) -> &[i32] {
        let base = self.base(a);
        &self.banks[base..base + LANES]
    }

    fn base(&self, a: BankAddr) -> usize {
        ((a.bank as usize - 1) * self.cfg.bank_words + a.word as usize) * LANES
    }

    fn row(&self, a: BankAddr, r: usize) -> &[i32] {
        self.word(Timing::at(a, r))
    }

    pub fn reset(&mut self, input: &[Fix8]) -> Result<(), PeError> {
        if input.len() != self.input_len() {
            return Err(PeError::InputLength { expected: self.input_len(), got: input.len() });
        }
        self.banks.fill(0);
        self.weights.fill(Fix8::ZERO);
        self.bias.fill(Fix8::ZERO);
        self.input.fill(Fix8::ZERO);
        self.input[..input.len()].copy_from_slice(input);
        self.output.fill(Fix8::ZERO);
        self.out_len = 0;
        self.timing = Timing::new(&self.cfg);
        self.pc = 0;
        self.halted = false;
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        Ok(())
    }

    pub fn run_inference(&mut self, input: &[Fix8]) -> Result<RunResult, PeError> {
        self.reset(input)?;
        while !self.halted {
            self.step()?;
        }
        Ok(RunResult {
            output: self.output[..self.out_len].to_vec(),
            cycles: self.timing.finished.unwrap_or(0),
            stall_cycles: self.timing.stall_cycles,
        })
    }

    fn fault(&self, msg: impl Into<String>) -> Fault {
        Fault { cycle: self.timing.next_issue, pc: self.pc, msg: msg.into() }
    }

    fn merged(&self, m: &MergeOp, r: usize, bias: bool) -> Result<Vec<WideAcc>, Fault> {
        let a = self.row(m.a, r);
        let b = m.b.map(|b| self.row(b, r));
        (0..LANES)
            .map(|c| {
                let mut v = WideAcc::from_bits(a[c]);
                if let Some(b) = b {
                    v = v.checked_add(WideAcc::from_bits(b[c])).ok_or_else(|| self.fault("accumulator overflow"))?;
                }
                if bias && c < self.bias.len() {
                    v = v.checked_add(self.bias[c].widen()).ok_or_else(|| self.fault("accumulator overflow"))?;
                }
                Ok(v)
            })
            .collect()
    }

    fn exec_compute(&mut self, op: ComputeOp) -> Result<(), Fault> {
        let n = self.cfg.array_dim;
        match op {
            ComputeOp::Nop | ComputeOp::Start { .. } | ComputeOp::Fin => {}
            ComputeOp::Mm { src, rows, dst, acc } => {
                let mut out = Vec::with_capacity(rows as usize);
                for r in 0..rows as usize {
                    let x = self.row(src, r);
                    let mut o = vec![0i32; LANES];
                    for (c, slot) in o.iter_mut().enumerate().take(n) {
                        let mut s = match acc {
                            Some(a) => WideAcc::from_bits(self.row(a, r)[c]),
                            None => WideAcc::ZERO,
                        };
                        for k in 0..n.min(LANES) {
                            let p = Fix8::from_bits(x[k] as u8).mul(self.weights[k * n + c]);
                            s = s.checked_add(p).ok_or_else(|| self.fault("accumulator overflow"))?;
                        }
                        *slot = s.bits();
                    }
                    out.push(o);
                }
                for (r, o) in out.into_iter().enumerate() {
                    let base = self.base(Timing::at(dst, r));
                    self.banks[base..base + LANES].copy_from_slice(&o);
                }
            }
            ComputeOp::Acc(m) | ComputeOp::Acca { m, .. } | ComputeOp::Accp { m, .. } => {
                let (table, bias, pool) = match op {
                    ComputeOp::Acca { table, bias, .. } => (Some(table), bias, None),
                    ComputeOp::Accp { table, bias, pool, .. } => (Some(table), bias, Some(pool)),
                    _ => (None, false, None),
                };
                let mut rows = Vec::with_capacity(m.rows as usize);
                for r in 0..m.rows as usize {
                    let v = self.merged(&m, r, bias)?;
                    rows.push(match table {
                        None => v.iter().map(|a| a.bits()).collect::<Vec<i32>>(),
                        Some(t) => {
                            let act = &self.img.act_tables[t as usize];
                            v.iter().map(|a| act.activate(a.requantize()).raw() as i32).collect()
                        }
                    });
                }
                if let Some(p) = pool {
                    let (w, st) = (p.window as usize, p.stride as usize);
                    rows = (0..=(rows.len() - w) / st)
                        .map(|q| (0..LANES).map(|c| (0..w).map(|k| rows[q * st + k][c]).max().unwrap()).collect())
                        .collect();
                }
                for (r, o) in rows.into_iter().enumerate() {
                    let base = self.base(Timing::at(m.dst, r));
                    self.banks[base..base + LANES].copy_from_slice(&o);
                }
            }
            other => return Err(self.fault(format!("{} is not an HPE instruction", other.mnemonic()))),
        }
        Ok(())
    }

    fn exec_param(&mut self, op: ParamOp) -> Result<(), Fault> {
        let n = self.cfg.array_dim;
        if let ParamOp::Ldp { addr, rows, cols, dst } = op {
            let (addr, rows, cols) = (addr as usize, rows as usize, cols as usize);
            let block = &self.img.param_image[addr..addr + rows * cols];
            match dst {
                ParamDst::Weights => {
                    self.weights.fill(Fix8::ZERO);
                    for r in 0..rows {
                        for c in 0..cols {
                            self.weights[r * n + c] = Fix8::from_bits(block[r * cols + c]);
                        }
                    }
                }
                ParamDst::Bias => {
                    self.bias.fill(Fix8::ZERO);
                    for (c, b) in block.iter().enumerate() {
                        self.bias[c] = Fix8::from_bits(*b);
                    }
                }
                other => return Err(self.fault(format!("LDP to {other:?} on the HPE"))),
            }
        }
        Ok(())
    }

    fn exec_data(&mut self, op: DataOp) -> Result<(), Fault> {
        let lane_base = |s: &Self, l: Loc| match l {
            Loc::Bank { bank, word, lane } => s.base(BankAddr { bank, word }) + lane as usize,
            Loc::Reg { .. } => unreachable!("validated HPE program"),
        };
        match op {
            DataOp::Nop => {}
            DataOp::LdrInput { offset, len, dst } => {
                let d = lane_base(self, dst);
                for i in 0..len as usize {
                    self.banks[d + i] = self.input[offset as usize + i].raw() as i32;
                }
            }
            DataOp::LdrCopy { src, len, dst } => {
                let (s, d) = (lane_base(self, src), lane_base(self, dst));
                self.banks.copy_within(s..s + len as usize, d);
            }
            DataOp::Str { src, len, out } => {
                let s = lane_base(self, src);
                for i in 0..len as usize {
                    self.output[out as usize + i] = Fix8::from_bits(self.banks[s + i] as u8);
                }
                self.out_len = self.out_len.max(out as usize + len as usize);
            }
        }
        Ok(())
    }

    /// Issues and executes one bundle. Slots act in the order compute, param, data.
    pub fn step(&mut self) -> Result<(), Fault> {
        if self.halted {
            return Err(self.fault("step after halt"));
        }
        let Some(&b) = self.img.bundles.get(self.pc) else {
            self.halted = true;
            return Err(self.fault("ran past the last bundle"));
        };
        let s = self.timing.issue(&b);
        self.exec_compute(b.compute)?;
        self.exec_param(b.param)?;
        self.exec_data(b.data)?;
        if let Some(tr) = self.trace.as_mut() {
            let p = self.timing.port_use(s);
            tr.push(format!(
                "{:>6} pc={:<4} {} | ports b1={} b2={} b3={} stalls={}",
                s,
                self.pc,
                isa::format_bundle(&b),
                p[0],
                p[1],
                p[2],
                self.timing.stall_cycles
            ));
        }
        self.pc += 1;
        if b.compute == ComputeOp::Fin {
            self.halted = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocked::gemm_ref;
    use crate::fix8::ActTable;
    use crate::isa::assemble;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hex(bytes: impl IntoIterator<Item = u8>) -> String {
        bytes.into_iter().map(|b| format!("{b:02x}")).collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Fix8Matrix {
        Fix8Matrix::from_fn(rows, cols, |_, _| Fix8::from_bits(rng.gen()))
    }

    #[test]
    fn default_config() {
        let c = HpeConfig::default();
        assert_eq!((c.array_dim, c.bank_count, c.bank_words, c.ports_per_bank), (32, 3, 1024, 2));
        assert_eq!((c.pcache_bytes, c.icache_bytes, c.weight_preload_cycles), (524288, 8192, 32));
    }

    #[test]
    fn mm_tile_latency() {
        let cfg = HpeConfig::default();
        let src = vec![vec![Fix8::ZERO; 32]; 32];
        let (_, cycles) = mm_tile(&src, &Fix8Matrix::identity(32), &cfg);
        assert_eq!(cycles, 32 + 32 + 63);
        for l in 1..32 {
            assert_eq!(cfg.mm_cycles(l + 1) - cfg.mm_cycles(l), 1);
        }
    }

    #[test]
    fn mm_tile_identity_and_random() {
        let cfg = HpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 7, 32);
        let rows: Vec<Vec<Fix8>> = (0..7).map(|r| a.row(r).to_vec()).collect();
        let (out, _) = mm_tile(&rows, &Fix8Matrix::identity(32), &cfg);
        for r in 0..7 {
            let back: Vec<Fix8> = out[r].iter().map(|w| w.requantize()).collect();
            assert_eq!(back, rows[r]);
        }
        let w = random_matrix(&mut rng, 32, 32);
        let (out, _) = mm_tile(&rows, &w, &cfg);
        let want = gemm_ref(&a, &w, &ActTable::identity()).unwrap();
        for r in 0..7 {
            for c in 0..32 {
                assert_eq!(out[r][c].requantize(), want.get(r, c));
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        let v = |xs: &[f64]| xs.iter().map(|&x| Fix8::encode(x)).collect::<Vec<_>>();
        assert_eq!(maxpool(&v(&[1.0, -2.0, 0.5])), Some(Fix8::encode(1.0)));
        assert_eq!(maxpool(&v(&[0.25; 4])), Some(Fix8::encode(0.25)));
        assert_eq!(maxpool(&[]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let w: Vec<Fix8> = (0..rng.gen_range(1..9)).map(|_| Fix8::from_bits(rng.gen())).collect();
            let best = w.iter().map(|x| x.decode()).fold(f64::MIN, f64::max);
            assert_eq!(maxpool(&w).unwrap().decode(), best);
        }
    }

    fn single_tile_source(w: &Fix8Matrix, bias: &[Fix8], l: usize) -> String {
        let mut s = format!(
            ".target hpe\n.table 0 relu\n.param {}{}\n",
            hex(w.elems().iter().map(|x| x.bits())),
            hex(bias.iter().map(|x| x.bits()))
        );
        s += "START 64 | LDP @0, 32x32 -> w | LDR in+0, 32 -> b1:0.0\n";
        s += "NOP | LDP @1024, 1x32 -> bias | LDR in+32, 32 -> b1:1.0\n";
        s += &format!("MM b1:0, {l} -> b2:0\n");
        s += &format!("ACCA b2:0, zero -> b1:100, {l}, t0, bias\n");
        s += &format!("FIN | STR b1:{}.0, 32 -> out+0\n", 100 + l - 1);
        s
    }

    #[test]
    fn single_tile_program_matches_reference_and_formula() {
        let cfg = HpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_matrix(&mut rng, 32, 32);
        let bias: Vec<Fix8> = (0..32).map(|_| Fix8::from_bits(rng.gen())).collect();
        let img = assemble(&single_tile_source(&w, &bias, 2), None).unwrap();
        let input: Vec<Fix8> = (0..64).map(|_| Fix8::from_bits(rng.gen())).collect();
        let mut sim = HpeSim::load(&img, &cfg).unwrap();
        let r = sim.run_inference(&input).unwrap();
        // Two load bundles, then the MM, the merge and the drain.
        assert_eq!(r.cycles, 2 + cfg.mm_cycles(2) + 2 + cfg.drain_cycles);
        assert_eq!(r.stall_cycles, 0);
        assert_eq!(predict_cycles(&img, &cfg), (r.cycles, 0));

        let x = Fix8Matrix::new(1, 32, input[32..].to_vec()).unwrap();
        let aug = w.with_row(&bias).unwrap();
        let xa = Fix8Matrix::new(1, 33, [x.row(0), &[Fix8::ONE]].concat()).unwrap();
        let want = gemm_ref(&xa, &aug, &ActTable::relu()).unwrap();
        assert_eq!(r.output, want.row(0));
    }

    #[test]
    fn merge_with_zero_is_identity_and_relu_clamps() {
        let cfg = HpeConfig::default();
        let src = ".target hpe\n.table 1 relu\nSTART | LDR in+0, 32 -> b1:0.0\nACC b1:0, zero -> b2:0, 1\nACCA b1:0, zero -> b3:0, 1, t1\nFIN";
        let img = assemble(src, None).unwrap();
        let mut sim = HpeSim::load(&img, &cfg).unwrap();
        let input: Vec<Fix8> = (0..64).map(|i| Fix8::from_bits((i as u8).wrapping_mul(37))).collect();
        sim.run_inference(&input).unwrap();
        let raw: Vec<i32> = input[..32].iter().map(|x| x.raw() as i32).collect();
        assert_eq!(sim.word(BankAddr::new(2, 0)), &raw[..]);
        // b1 holds Fix8 lanes; ACCA reads them as Q.10 and requantizes, so the
        // relu'd result is the raw value shifted down by 5 bits, never negative.
        for (c, v) in sim.word(BankAddr::new(3, 0)).iter().enumerate() {
            let want = WideAcc::from_bits(raw[c]).requantize().raw().max(0) as i32;
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn two_tile_accumulation_matches_reference() {
        let cfg = HpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 1, 64);
        let w = random_matrix(&mut rng, 64, 32);
        let top: Vec<u8> = (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).map(|(r, c)| w.get(r, c).bits()).collect();
        let bot: Vec<u8> = (32..64).flat_map(|r| (0..32).map(move |c| (r, c))).map(|(r, c)| w.get(r, c).bits()).collect();
        let src = format!(
            ".target hpe\n.param {}{}\nSTART | LDP @0, 32x32 -> w | LDR in+0, 32 -> b1:0.0\n\
             NOP | NOP | LDR in+32, 32 -> b1:1.0\n\
             MM b1:0, 1 -> b2:0 | LDP @1024, 32x32 -> w\n\
             MM b1:1, 1 -> b3:0\n\
             ACC b2:0, b3:0 -> b2:40, 1\n\
             ACCA b2:40, zero -> b1:5, 1, t0\n\
             FIN | STR b1:5.0, 32 -> out+0",
            hex(top),
            hex(bot)
        );
        let img = assemble(&src, None).unwrap();
        let r = HpeSim::load(&img, &cfg).unwrap().run_inference(a.row(0)).unwrap();
        assert_eq!(r.output, gemm_ref(&a, &w, &ActTable::identity()).unwrap().row(0));
        assert_eq!(r.stall_cycles, 0);
    }

    #[test]
    fn chained_mm_equals_merge() {
        let cfg = HpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_matrix(&mut rng, 64, 32);
        let bytes: Vec<u8> = w.elems().iter().map(|x| x.bits()).collect();
        let src = format!(
            ".target hpe\n.param {}\nSTART | LDP @0, 32x32 -> w | LDR in+0, 32 -> b1:0.0\n\
             NOP | NOP | LDR in+32, 32 -> b1:1.0\n\
             MM b1:0, 1 -> b2:0 | LDP @1024, 32x32 -> w\n\
             MM b1:1, 1, b2:0 -> b3:0\n\
             ACCA b3:0, zero -> b1:5, 1, t0\n\
             FIN | STR b1:5.0, 32 -> out+0",
            hex(bytes)
        );
        let img = assemble(&src, None).unwrap();
        let input: Vec<Fix8> = (0..64).map(|_| Fix8::from_bits(rng.gen())).collect();
        let r = HpeSim::load(&img, &cfg).unwrap().run_inference(&input).unwrap();
        let a = Fix8Matrix::new(1, 64, input).unwrap();
        assert_eq!(r.output, gemm_ref(&a, &w, &ActTable::identity()).unwrap().row(0));
        assert_eq!(r.stall_cycles, 0);
    }

    #[test]
    fn three_accesses_to_one_bank_stall() {
        let cfg = HpeConfig::default();
        let img = assemble(".target hpe\nSTART\nACC b1:0, b1:100 -> b1:200, 4\nFIN", None).unwrap();
        let r = HpeSim::load(&img, &cfg).unwrap().run_inference(&[Fix8::ZERO; 64]).unwrap();
        assert!(r.stall_cycles > 0);

        // A copy inside bank 1 while a merge streams through bank 1.
        let img = assemble(".target hpe\nSTART\nACC b1:0, b2:0 -> b1:200, 8\nNOP | NOP | LDR b1:300.0, 4 -> b1:301.0\nFIN", None).unwrap();
        let r = HpeSim::load(&img, &cfg).unwrap().run_inference(&[Fix8::ZERO; 64]).unwrap();
        assert!(r.stall_cycles > 0);
        assert_eq!(predict_cycles(&img, &cfg), (r.cycles, r.stall_cycles));
    }

    #[test]
    fn pooled_merge() {
        let cfg = HpeConfig::default();
        let src = ".target hpe\n.table 0 identity\nSTART | LDR in+0, 32 -> b1:0.0\nNOP | NOP | LDR in+32, 32 -> b1:1.0\nNOP | NOP | LDR in+0, 32 -> b1:2.0\nACC b1:0, zero -> b2:0, 3\nACCP b2:0, zero -> b3:0, 3, t0, pool 2/1\nFIN";
        let img = assemble(src, None).unwrap();
        let mut sim = HpeSim::load(&img, &cfg).unwrap();
        let input: Vec<Fix8> = (0..64).map(|i| Fix8::from_bits((i as u8).wrapping_mul(91))).collect();
        sim.run_inference(&input).unwrap();
        for q in 0..2 {
            for c in 0..32 {
                let rows = [&input[..32], &input[32..], &input[..32]];
                let want = maxpool(&[
                    WideAcc::from_bits(rows[q][c].raw() as i32).requantize(),
                    WideAcc::from_bits(rows[q + 1][c].raw() as i32).requantize(),
                ])
                .unwrap();
                assert_eq!(sim.word(BankAddr::new(3, q as u16))[c], want.raw() as i32);
            }
        }
    }

    #[test]
    fn generated_programs_run_and_timing_agrees() {
        let cfg = HpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let img = crate::isa::gen::random_program(Target::Hpe, 12, &mut rng);
            let mut sim = HpeSim::load(&img, &cfg).unwrap();
            let input: Vec<Fix8> = (0..sim.input_len()).map(|_| Fix8::from_bits(rng.gen())).collect();
            let r = sim.run_inference(&input).unwrap();
            assert_eq!(predict_cycles(&img, &cfg), (r.cycles, r.stall_cycles));
        }
    }
}
