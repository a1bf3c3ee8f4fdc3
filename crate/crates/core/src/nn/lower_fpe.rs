//! Dense layers to FPE bundles.
//!
//! Each layer is a blocked GEMV with 32-row by 8-column weight blocks. Every
//! output block runs one compute bundle per input block and ends in an MVAA
//! that activates and writes 8 lanes back to the regfile. Activations
//! ping-pong between two regfile regions.
//!
//! Scheduling is a greedy list scheduler over three slot streams. Compute ops
//! issue in order. The weight block for compute `k` goes into parameter buffer
//! `k % 2`, loaded in the earliest free parameter slot after that buffer's
//! previous reader. Bias blocks preload an accumulator group the same way.
//! A compute op also waits until its regfile word has been written back.

use super::{CompileError, CompiledProgram, Layer, ModelSpec, Region, WeightsFile};
use crate::fix8::{ActKind, ActTable};
use crate::fpe::FpeConfig;
use crate::isa::{self, ComputeOp, DataOp, Loc, ParamDst, ParamOp, PeConfig, ProgramImage, Target, VliwBundle, ACT_TABLE_SLOTS};

/// Assigns activation kinds to table slots in order of first use.
pub(super) fn table_slots(kinds: impl IntoIterator<Item = ActKind>) -> Result<Vec<ActKind>, CompileError> {
    let mut slots: Vec<ActKind> = Vec::new();
    for k in kinds {
        if !slots.contains(&k) {
            slots.push(k);
        }
    }
    if slots.len() > ACT_TABLE_SLOTS {
        return Err(CompileError::Capacity { resource: "activation tables", used: slots.len(), capacity: ACT_TABLE_SLOTS });
    }
    Ok(slots)
}

pub(super) fn install_tables(img: &mut ProgramImage, slots: &[ActKind]) {
    for (i, k) in slots.iter().enumerate() {
        img.act_tables[i] = ActTable::build(*k).expect("built-in kind");
    }
}

/// Parameter image under construction.
#[derive(Default)]
pub(super) struct ParamImage {
    pub bytes: Vec<u8>,
}

impl ParamImage {
    /// Appends a block at the next multiple of `align` and returns its address.
    pub fn push(&mut self, align: usize, block: impl IntoIterator<Item = u8>) -> u32 {
        let at = self.bytes.len().next_multiple_of(align);
        self.bytes.resize(at, 0);
        self.bytes.extend(block);
        at as u32
    }
}

/// Free-slot search over one slot stream.
#[derive(Default)]
struct Slots(Vec<bool>);

impl Slots {
    fn take_from(&mut self, from: usize) -> usize {
        let mut i = from;
        while self.0.get(i).copied().unwrap_or(false) {
            i += 1;
        }
        if i >= self.0.len() {
            self.0.resize(i + 1, false);
        }
        self.0[i] = true;
        i
    }
}

pub fn compile_fpe(spec: &ModelSpec, weights: &WeightsFile, cfg: &FpeConfig) -> Result<CompiledProgram, CompileError> {
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    let mut dims = Vec::new();
    for l in &spec.layers {
        match *l {
            Layer::Dense { inputs, outputs, act } => dims.push((inputs, outputs, act)),
            _ => return Err(CompileError::Unsupported(format!("{} layers run on the HPE only", l.kind_name()))),
        }
    }
    let params = weights.per_layer(spec);
    let slots = table_slots(dims.iter().map(|d| d.2))?;
    let (wl, t, depth) = (cfg.word_len(), cfg.t, cfg.pipeline_depth as usize);
    let out_len = shapes.last().unwrap().1 .1;
    if out_len > cfg.output_len.min(wl) {
        return Err(CompileError::Capacity { resource: "output buffer", used: out_len, capacity: cfg.output_len.min(wl) });
    }
    if spec.input_len > cfg.input_bytes {
        return Err(CompileError::Capacity { resource: "input buffer", used: spec.input_len, capacity: cfg.input_bytes });
    }

    let words = |n: usize| n.div_ceil(wl);
    let region = dims.iter().map(|d| words(d.1)).chain([words(spec.input_len)]).max().unwrap();
    if 2 * region > cfg.regfile_words {
        return Err(CompileError::Capacity { resource: "regfile", used: 2 * region, capacity: cfg.regfile_words });
    }

    let mut compute: Vec<(usize, ComputeOp)> = Vec::new();
    let mut param_ops: Vec<(usize, ParamOp)> = Vec::new();
    let mut data: Vec<(usize, DataOp)> = Vec::new();
    let mut pslots = Slots::default();
    let mut pimg = ParamImage::default();
    let mut layout = Vec::new();
    let mut ready = vec![0usize; cfg.regfile_words];

    for w in 0..words(spec.input_len) {
        let len = (spec.input_len - w * wl).min(wl);
        data.push((w, DataOp::LdrInput { offset: (w * wl) as u8, len: len as u8, dst: Loc::Reg { word: w as u8, lane: 0 } }));
        ready[w] = w + 1;
    }
    layout.push(Region { layer: None, space: "regfile".into(), what: "input".into(), start: 0, len: words(spec.input_len) });

    // Bundle 0 holds START, so compute starts at 1.
    let mut last_c = 0usize;
    let mut pbuf_free = [0usize; 2];
    let mut acc_free = vec![0usize; cfg.acc_groups];
    let (mut k, mut block) = (0usize, 0usize);
    let mut out_base = 0;

    for (li, &(inp, out, act)) in dims.iter().enumerate() {
        let p = params[li].unwrap();
        let in_base = (li % 2) * region;
        out_base = ((li + 1) % 2) * region;
        let table = slots.iter().position(|k| *k == act).unwrap() as u8;
        let (x, y) = (inp.div_ceil(wl), out.div_ceil(t));
        let p_start = pimg.bytes.len();
        for j in 0..y {
            let g = block % cfg.acc_groups;
            block += 1;
            let cols = (out - j * t).min(t);
            let bias = &p.bias[j * t..j * t + cols];
            let preload = x < 2 || bias.iter().any(|b| b.bits() != 0);
            let mut bias_slot = None;
            if preload {
                let addr = pimg.push(8, bias.iter().map(|b| b.bits()));
                let s = pslots.take_from(acc_free[g]);
                param_ops.push((s, ParamOp::Ldp { addr, rows: 1, cols: cols as u8, dst: ParamDst::Acc(g as u8) }));
                bias_slot = Some(s);
            }
            for i in 0..x {
                let rows = (inp - i * wl).min(wl);
                let addr = pimg.push(
                    8,
                    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| p.weights.get(i * wl + r, j * t + c).bits()),
                );
                let pb = k % 2;
                k += 1;
                let s = pslots.take_from(pbuf_free[pb]);
                param_ops.push((s, ParamOp::Ldp { addr, rows: rows as u8, cols: cols as u8, dst: ParamDst::Pbuf(pb as u8) }));
                let src = in_base + i;
                let mut c = (last_c + 1).max(s + 1).max(ready[src]);
                if i == 0 {
                    if let Some(bs) = bias_slot {
                        c = c.max(bs + 1);
                    }
                }
                let (src, pbuf, acc) = (src as u8, pb as u8, g as u8);
                let op = if i + 1 == x {
                    let dst = out_base + j * t / wl;
                    ready[dst] = ready[dst].max(c + depth);
                    ComputeOp::Mvaa { src, pbuf, acc, table, dst: dst as u8, offset: ((j * t) % wl) as u8 }
                } else if i == 0 && !preload {
                    ComputeOp::Mv { src, pbuf, acc }
                } else {
                    ComputeOp::Mva { src, pbuf, acc }
                };
                compute.push((c, op));
                pbuf_free[pb] = c;
                acc_free[g] = c;
                last_c = c;
            }
        }
        layout.push(Region {
            layer: Some(li),
            space: "pcache".into(),
            what: "weights+bias".into(),
            start: p_start,
            len: pimg.bytes.len() - p_start,
        });
        layout.push(Region { layer: Some(li), space: "regfile".into(), what: "output".into(), start: out_base, len: words(out) });
    }

    if pimg.bytes.len() > cfg.pcache_bytes {
        return Err(CompileError::Capacity { resource: "pCache", used: pimg.bytes.len(), capacity: cfg.pcache_bytes });
    }
    let fin = (last_c + 1).max(ready[out_base]).max(data.len()).max(pslots.0.len());
    let n = fin + 1;
    if n * Target::Fpe.bundle_bytes() > cfg.icache_bytes {
        return Err(CompileError::Capacity {
            resource: "iCache",
            used: n * Target::Fpe.bundle_bytes(),
            capacity: cfg.icache_bytes,
        });
    }

    let mut img = ProgramImage::new(Target::Fpe);
    img.bundles = vec![VliwBundle::default(); n];
    img.bundles[0].compute = ComputeOp::Start { input_len: spec.input_len as u8 };
    for (c, op) in compute {
        img.bundles[c].compute = op;
    }
    for (s, op) in param_ops {
        img.bundles[s].param = op;
    }
    for (d, op) in data {
        img.bundles[d].data = op;
    }
    img.bundles[fin].compute = ComputeOp::Fin;
    img.bundles[fin].data = DataOp::Str { src: Loc::Reg { word: out_base as u8, lane: 0 }, len: out_len as u8, out: 0 };
    img.param_image = pimg.bytes;
    install_tables(&mut img, &slots);

    let diags = isa::validate(&img, &PeConfig::Fpe(cfg.clone()));
    assert!(diags.is_empty(), "compiler emitted an invalid FPE program: {diags:?}");
    let predicted_cycles = n as u64 + cfg.pipeline_depth;
    Ok(CompiledProgram { image: img, layout, predicted_cycles })
}
