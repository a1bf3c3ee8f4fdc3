//! Fast Process Element: a VLIW GEMV engine with inline accumulators.

use serde::{Deserialize, Serialize};

use crate::fix8::{ActTable, Fix8, WideAcc};
use crate::isa::{self, ComputeOp, DataOp, Loc, ParamDst, ParamOp, PeConfig, ProgramImage, Target};
use crate::pe::{Fault, PeError, RunResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpeConfig {
    /// Multipliers per dot unit.
    pub n: usize,
    /// Dot units per SIMD lane.
    pub t: usize,
    /// SIMD lanes.
    pub k: usize,
    /// Regfile depth in 256-bit words.
    pub regfile_words: usize,
    pub pcache_bytes: usize,
    pub icache_bytes: usize,
    /// Cycles from issue to regfile writeback.
    pub pipeline_depth: u64,
    pub acc_groups: usize,
    pub param_buffers: usize,
    pub input_bytes: usize,
    pub output_len: usize,
}

impl Default for FpeConfig {
    fn default() -> Self {
        FpeConfig {
            n: 8,
            t: 8,
            k: 4,
            regfile_words: 32,
            pcache_bytes: 8192,
            icache_bytes: 1024,
            pipeline_depth: Self::derived_pipeline_depth(8),
            acc_groups: 4,
            param_buffers: 2,
            input_bytes: 64,
            output_len: 32,
        }
    }
}

impl FpeConfig {
    /// Multiply, adder tree of depth ceil(log2 n), accumulate, activate.
    pub fn derived_pipeline_depth(n: usize) -> u64 {
        let tree = usize::BITS - (n.max(1) - 1).leading_zeros();
        1 + tree as u64 + 1 + 1
    }

    /// Elements per regfile word and per MV input slice.
    pub fn word_len(&self) -> usize {
        self.n * self.k
    }
}

enum Dest {
    Reg { word: usize, lane: usize },
    Pbuf(usize),
    Acc(usize),
}

enum Payload {
    Fix(Vec<Fix8>),
    Wide(Vec<WideAcc>),
}

struct Pending {
    ready: u64,
    dst: Dest,
    data: Payload,
}

/// Bundle-per-cycle FPE model with a fixed writeback latency.
///
/// Within one cycle: due pending writes commit, the compute slot runs
/// (accumulators update at once, MVAA results land `pipeline_depth` cycles
/// later), then STR reads the regfile. LDR and LDP land on the next cycle.
pub struct FpeSim {
    cfg: FpeConfig,
    img: ProgramImage,
    regfile: Vec<Fix8>,
    pbuf: Vec<Vec<Fix8>>,
    acc: Vec<Vec<WideAcc>>,
    input: Vec<Fix8>,
    output: Vec<Fix8>,
    out_len: usize,
    pending: Vec<Pending>,
    pc: usize,
    cycle: u64,
    halted: bool,
    trace: Option<Vec<String>>,
}

impl FpeSim {
    pub fn load(img: &ProgramImage, cfg: &FpeConfig) -> Result<Self, PeError> {
        if img.target != Target::Fpe {
            return Err(PeError::WrongTarget { expected: Target::Fpe, found: img.target });
        }
        let diags = isa::validate(img, &PeConfig::Fpe(cfg.clone()));
        if !diags.is_empty() {
            return Err(PeError::Invalid(diags));
        }
        let w = cfg.word_len();
        Ok(FpeSim {
            cfg: cfg.clone(),
            img: img.clone(),
            regfile: vec![Fix8::ZERO; cfg.regfile_words * w],
            pbuf: vec![vec![Fix8::ZERO; w * cfg.t]; cfg.param_buffers],
            acc: vec![vec![WideAcc::ZERO; cfg.t]; cfg.acc_groups],
            input: vec![Fix8::ZERO; cfg.input_bytes],
            output: vec![Fix8::ZERO; cfg.output_len],
            out_len: 0,
            pending: Vec::new(),
            pc: 0,
            cycle: 0,
            halted: false,
            trace: None,
        })
    }

    pub fn config(&self) -> &FpeConfig {
        &self.cfg
    }

    pub fn program(&self) -> &ProgramImage {
        &self.img
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    /// Trace lines recorded since the last reset, one per executed bundle.
    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn accumulators(&self, group: usize) -> &[WideAcc] {
        &self.acc[group]
    }

    pub fn regfile_word(&self, word: usize) -> &[Fix8] {
        let w = self.cfg.word_len();
        &self.regfile[word * w..(word + 1) * w]
    }

    /// Expected input length: the program's `START` operand, or the full buffer.
    pub fn input_len(&self) -> usize {
        self.img.input_len().unwrap_or(self.cfg.input_bytes)
    }

    /// Clears all temporal state and places `input` in the input buffer.
    pub fn reset(&mut self, input: &[Fix8]) -> Result<(), PeError> {
        if input.len() != self.input_len() {
            return Err(PeError::InputLength { expected: self.input_len(), got: input.len() });
        }
        self.regfile.fill(Fix8::ZERO);
        self.pbuf.iter_mut().for_each(|b| b.fill(Fix8::ZERO));
        self.acc.iter_mut().for_each(|a| a.fill(WideAcc::ZERO));
        self.input.fill(Fix8::ZERO);
        self.input[..input.len()].copy_from_slice(input);
        self.output.fill(Fix8::ZERO);
        self.out_len = 0;
        self.pending.clear();
        self.pc = 0;
        self.cycle = 0;
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
        Ok(RunResult { output: self.output[..self.out_len].to_vec(), cycles: self.cycle, stall_cycles: 0 })
    }

    fn fault(&self, msg: impl Into<String>) -> Fault {
        Fault { cycle: self.cycle, pc: self.pc, msg: msg.into() }
    }

    fn commit(&mut self, upto: u64) {
        let w = self.cfg.word_len();
        let t = self.cfg.t;
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].ready > upto {
                i += 1;
                continue;
            }
            let p = self.pending.remove(i);
            match (p.dst, p.data) {
                (Dest::Reg { word, lane }, Payload::Fix(v)) => {
                    let base = word * w + lane;
                    self.regfile[base..base + v.len()].copy_from_slice(&v);
                }
                (Dest::Pbuf(b), Payload::Fix(v)) => self.pbuf[b] = v,
                (Dest::Acc(g), Payload::Wide(v)) => self.acc[g][..t].copy_from_slice(&v),
                _ => unreachable!("payload kind matches destination"),
            }
        }
    }

    fn dot(&self, src: u8, pbuf: u8) -> Result<Vec<WideAcc>, Fault> {
        let (w, t) = (self.cfg.word_len(), self.cfg.t);
        let x = self.regfile_word(src as usize);
        let m = &self.pbuf[pbuf as usize];
        (0..t)
            .map(|j| {
                (0..w).try_fold(WideAcc::ZERO, |s, i| s.checked_add(x[i].mul(m[i * t + j])))
                    .ok_or_else(|| self.fault("accumulator overflow"))
            })
            .collect()
    }

    fn accumulate(&mut self, acc: u8, add: Vec<WideAcc>, keep: bool) -> Result<(), Fault> {
        for (j, v) in add.into_iter().enumerate() {
            let cur = self.acc[acc as usize][j];
            self.acc[acc as usize][j] = if keep {
                cur.checked_add(v).ok_or_else(|| self.fault("accumulator overflow"))?
            } else {
                v
            };
        }
        Ok(())
    }

    /// Executes one bundle.
    pub fn step(&mut self) -> Result<(), Fault> {
        if self.halted {
            return Err(self.fault("step after halt"));
        }
        let Some(&b) = self.img.bundles.get(self.pc) else {
            self.halted = true;
            return Err(self.fault("ran past the last bundle"));
        };
        self.commit(self.cycle);
        let depth = self.cfg.pipeline_depth;
        let t = self.cfg.t;

        match b.compute {
            ComputeOp::Nop | ComputeOp::Start { .. } | ComputeOp::Fin => {}
            ComputeOp::Mv { src, pbuf, acc } => {
                let d = self.dot(src, pbuf)?;
                self.accumulate(acc, d, false)?;
            }
            ComputeOp::Mva { src, pbuf, acc } => {
                let d = self.dot(src, pbuf)?;
                self.accumulate(acc, d, true)?;
            }
            ComputeOp::Mvaa { src, pbuf, acc, table, dst, offset } => {
                let d = self.dot(src, pbuf)?;
                self.accumulate(acc, d, true)?;
                let act: &ActTable = &self.img.act_tables[table as usize];
                let vals = self.acc[acc as usize].iter().map(|a| act.activate(a.requantize())).collect();
                self.pending.push(Pending {
                    ready: self.cycle + depth,
                    dst: Dest::Reg { word: dst as usize, lane: offset as usize },
                    data: Payload::Fix(vals),
                });
            }
            other => return Err(self.fault(format!("{} is not an FPE instruction", other.mnemonic()))),
        }

        if let ParamOp::Ldp { addr, rows, cols, dst } = b.param {
            let (addr, rows, cols) = (addr as usize, rows as usize, cols as usize);
            let block = &self.img.param_image[addr..addr + rows * cols];
            let (dst, data) = match dst {
                ParamDst::Pbuf(p) => {
                    let mut m = vec![Fix8::ZERO; self.cfg.word_len() * t];
                    for r in 0..rows {
                        for c in 0..cols {
                            m[r * t + c] = Fix8::from_bits(block[r * cols + c]);
                        }
                    }
                    (Dest::Pbuf(p as usize), Payload::Fix(m))
                }
                ParamDst::Acc(g) => {
                    let mut v = vec![WideAcc::ZERO; t];
                    for (c, byte) in block.iter().enumerate() {
                        v[c] = Fix8::from_bits(*byte).widen();
                    }
                    (Dest::Acc(g as usize), Payload::Wide(v))
                }
                other => return Err(self.fault(format!("LDP to {other:?} on the FPE"))),
            };
            self.pending.push(Pending { ready: self.cycle + 1, dst, data });
        }

        match b.data {
            DataOp::Nop => {}
            DataOp::LdrInput { offset, len, dst: Loc::Reg { word, lane } } => {
                let v = self.input[offset as usize..offset as usize + len as usize].to_vec();
                self.pending.push(Pending {
                    ready: self.cycle + 1,
                    dst: Dest::Reg { word: word as usize, lane: lane as usize },
                    data: Payload::Fix(v),
                });
            }
            DataOp::Str { src: Loc::Reg { word, lane }, len, out } => {
                let base = word as usize * self.cfg.word_len() + lane as usize;
                let (out, len) = (out as usize, len as usize);
                self.output[out..out + len].copy_from_slice(&self.regfile[base..base + len]);
                self.out_len = self.out_len.max(out + len);
            }
            other => return Err(self.fault(format!("{other:?} is not an FPE data access"))),
        }

        if let Some(tr) = self.trace.as_mut() {
            let accs: Vec<String> =
                self.acc.iter().map(|g| g.iter().map(|a| a.bits().to_string()).collect::<Vec<_>>().join(",")).collect();
            tr.push(format!("{:>6} pc={:<4} {} | acc [{}]", self.cycle, self.pc, isa::format_bundle(&b), accs.join("] [")));
        }

        self.pc += 1;
        if b.compute == ComputeOp::Fin {
            self.cycle += 1 + depth;
            self.commit(u64::MAX);
            self.halted = true;
        } else {
            self.cycle += 1;
        }
        Ok(())
    }
}
