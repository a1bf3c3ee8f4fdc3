//! Dense, Conv1D, MaxPool1D and RNN layers to HPE bundles.
//!
//! Every layer is a GEMM of an operand matrix with 32x32 weight tiles. For each
//! output tile the partial sums of all input tiles chain through MM's
//! accumulate operand, ping-ponging between banks 2 and 3, and one final
//! ACCA (ACCP when a max-pool follows a convolution) adds the bias, activates
//! and writes to bank 1.
//!
//! Activations live in bank 1 tile-major: element `(r, c)` of a matrix with
//! `rows` rows sits at word `base + (c / 32) * rows + r`, lane `c % 32`. An
//! operand tile whose elements already sit in consecutive words with matching
//! lanes is read in place. Other tiles are gathered into a staging region by
//! LDR runs before the layer's first MM.

use std::collections::HashMap;

use super::lower_fpe::{install_tables, table_slots, ParamImage};
use super::{CompileError, CompiledProgram, Layer, LayerParams, ModelSpec, Region, Shape, WeightsFile};
use crate::fix8::ActKind;
use crate::hpe::{predict_cycles, HpeConfig};
use crate::isa::{self, BankAddr, ComputeOp, DataOp, Loc, MergeOp, ParamDst, ParamOp, PeConfig, Pool, ProgramImage, Target, VliwBundle};

const LANES: usize = 32;

/// Where one operand element comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Input(usize),
    B1 { word: usize, lane: usize },
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    base: usize,
    rows: usize,
    cols: usize,
}

impl Placed {
    fn at(&self, r: usize, c: usize) -> Src {
        Src::B1 { word: self.base + (c / LANES) * self.rows + r, lane: c % LANES }
    }

    fn words(&self) -> usize {
        self.cols.div_ceil(LANES) * self.rows
    }
}

/// An activation matrix: the raw input or a bank-1 region.
#[derive(Clone, Copy, Debug)]
enum Act {
    Input(Shape),
    Bank(Placed),
}

impl Act {
    fn shape(&self) -> Shape {
        match *self {
            Act::Input(s) => s,
            Act::Bank(p) => (p.rows, p.cols),
        }
    }

    /// Element `(r, c)` of this activation viewed row-major with `width` columns.
    fn view(&self, width: usize, r: usize, c: usize) -> Src {
        let f = r * width + c;
        let cols = self.shape().1;
        match *self {
            Act::Input(_) => Src::Input(f),
            Act::Bank(p) => p.at(f / cols, f % cols),
        }
    }
}

/// First-fit allocator over bank-1 words.
struct Alloc {
    cap: usize,
    used: Vec<(usize, usize)>,
}

impl Alloc {
    fn take(&mut self, n: usize) -> Result<usize, CompileError> {
        self.used.sort_unstable();
        let mut at = 0;
        for &(s, l) in &self.used {
            if s >= at + n {
                break;
            }
            at = at.max(s + l);
        }
        if at + n > self.cap {
            let live: usize = self.used.iter().map(|u| u.1).sum();
            return Err(CompileError::Capacity { resource: "bank 1", used: live + n, capacity: self.cap });
        }
        self.used.push((at, n));
        Ok(at)
    }

    fn free(&mut self, start: usize) {
        self.used.retain(|u| u.0 != start);
    }
}

/// One MM row tile: `rows` operand rows from `r0`; pooled outputs start at `out0`.
#[derive(Clone, Copy)]
struct RowTile {
    r0: usize,
    rows: usize,
    out0: usize,
}

struct Builder {
    bundles: Vec<VliwBundle>,
    pimg: ParamImage,
    tiles: HashMap<(usize, usize, usize, usize), u32>,
    last_mm: usize,
    last_bias: usize,
    alloc: Alloc,
    layout: Vec<Region>,
    /// A bank-1 word written by the final merge of the previous layer.
    last_written: Option<usize>,
}

fn b1(word: usize) -> BankAddr {
    BankAddr::new(1, word as u16)
}

fn loc(word: usize, lane: usize) -> Loc {
    Loc::Bank { bank: 1, word: word as u16, lane: lane as u8 }
}

impl Builder {
    /// Places a parameter load in the first free slot at or after bundle `lo`.
    fn param(&mut self, lo: usize, op: ParamOp) {
        match (lo..self.bundles.len()).find(|&i| self.bundles[i].param == ParamOp::Nop) {
            Some(i) => self.bundles[i].param = op,
            None => self.bundles.push(VliwBundle { param: op, ..Default::default() }),
        }
    }

    fn push(&mut self, compute: ComputeOp) -> usize {
        self.bundles.push(VliwBundle::compute(compute));
        self.bundles.len() - 1
    }

    /// Address of a compact `rows x cols` block of `p`, stored on first use.
    fn weight_tile(&mut self, key: (usize, usize, usize, usize), p: &LayerParams, row0: usize, rows: usize, c0: usize, cols: usize) -> u32 {
        if let Some(&a) = self.tiles.get(&key) {
            return a;
        }
        let bytes: Vec<u8> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| p.weights.get(row0 + r, c0 + c).bits()).collect();
        let a = self.pimg.push(1, bytes);
        self.tiles.insert(key, a);
        a
    }

    fn bias_tile(&mut self, layer: usize, p: &LayerParams, ct: usize) -> (u32, usize) {
        let cols = (p.bias.len() - ct * LANES).min(LANES);
        let key = (layer, usize::MAX, 0, ct);
        if let Some(&a) = self.tiles.get(&key) {
            return (a, cols);
        }
        let a = self.pimg.push(1, p.bias[ct * LANES..ct * LANES + cols].iter().map(|b| b.bits()));
        self.tiles.insert(key, a);
        (a, cols)
    }

    fn mm(&mut self, src: usize, rows: usize, dst: BankAddr, acc: Option<BankAddr>, tile: (u32, usize, usize)) {
        let (addr, wr, wc) = tile;
        self.param(self.last_mm, ParamOp::Ldp { addr, rows: wr as u8, cols: wc as u8, dst: ParamDst::Weights });
        self.last_mm = self.push(ComputeOp::Mm { src: b1(src), rows: rows as u8, dst, acc });
    }

    fn merge(&mut self, a: BankAddr, rows: usize, dst: usize, table: u8, pool: Option<Pool>, bias: (u32, usize)) {
        self.param(self.last_bias, ParamOp::Ldp { addr: bias.0, rows: 1, cols: bias.1 as u8, dst: ParamDst::Bias });
        let m = MergeOp { a, b: None, dst: b1(dst), rows: rows as u8 };
        self.last_bias = self.push(match pool {
            None => ComputeOp::Acca { m, table, bias: true },
            Some(pool) => ComputeOp::Accp { m, table, bias: true, pool },
        });
    }

    /// Emits LDR runs that copy operand rows into staging, preceded by a read
    /// of the previous layer's last result so no copy overlaps its writes.
    fn gather(&mut self, mut ops: Vec<DataOp>) {
        if ops.is_empty() {
            return;
        }
        if let Some(w) = self.last_written {
            let reads_last = |op: &DataOp| matches!(op, DataOp::LdrCopy { src: Loc::Bank { word, .. }, .. } if *word as usize == w);
            match ops.iter().position(reads_last) {
                Some(i) => {
                    let op = ops.remove(i);
                    ops.insert(0, op);
                }
                None => ops.insert(0, DataOp::LdrCopy { src: loc(w, 0), len: 1, dst: loc(w, 0) }),
            }
        }
        let lo = if self.last_written.is_some() { self.bundles.len() } else { 0 };
        for op in ops {
            match (lo..self.bundles.len()).find(|&i| self.bundles[i].data == DataOp::Nop) {
                Some(i) => self.bundles[i].data = op,
                None => self.bundles.push(VliwBundle { data: op, ..Default::default() }),
            }
        }
    }
}

/// LDR runs filling `dst` lanes `[0, n)` from `src(j)`.
fn runs(n: usize, dst_word: usize, src: impl Fn(usize) -> Src, out: &mut Vec<DataOp>) {
    let mut j = 0;
    while j < n {
        let s0 = src(j);
        let mut len = 1;
        while j + len < n {
            let next = match (s0, src(j + len)) {
                (Src::Input(a), Src::Input(b)) => b == a + len,
                (Src::B1 { word: w, lane: l }, Src::B1 { word: w2, lane: l2 }) => w2 == w && l2 == l + len,
                _ => false,
            };
            if !next {
                break;
            }
            len += 1;
        }
        out.push(match s0 {
            Src::Input(off) => DataOp::LdrInput { offset: off as u8, len: len as u8, dst: loc(dst_word, j) },
            Src::B1 { word, lane } => DataOp::LdrCopy { src: loc(word, lane), len: len as u8, dst: loc(dst_word, j) },
        });
        j += len;
    }
}

/// An operand matrix and how its tiles are reached.
struct Operand {
    rows: usize,
    k: usize,
    /// Word holding rows `[r0, ..)` of input tile `kt`, keyed by `(r0, kt)`.
    words: HashMap<(usize, usize), usize>,
    staging: Option<usize>,
}

/// Resolves every `(row tile, k tile)` of `a` to consecutive bank-1 words,
/// queueing gathers for tiles that are not already laid out that way.
fn plan_operand(
    bld: &mut Builder,
    rows: usize,
    k: usize,
    tiles: &[RowTile],
    a: &dyn Fn(usize, usize) -> Src,
    gathers: &mut Vec<DataOp>,
) -> Result<Operand, CompileError> {
    let kts = k.div_ceil(LANES);
    let mut words = HashMap::new();
    let mut need = Vec::new();
    for t in tiles {
        for kt in 0..kts {
            let width = (k - kt * LANES).min(LANES);
            let direct = match a(t.r0, kt * LANES) {
                Src::B1 { word, lane: 0 } => {
                    (0..t.rows).all(|i| (0..width).all(|j| a(t.r0 + i, kt * LANES + j) == Src::B1 { word: word + i, lane: j }))
                        .then_some(word)
                }
                _ => None,
            };
            match direct {
                Some(w) => {
                    words.insert((t.r0, kt), w);
                }
                None => need.push((*t, kt)),
            }
        }
    }
    let mut staging = None;
    if !need.is_empty() {
        let st = Placed { base: 0, rows, cols: k };
        let base = bld.alloc.take(st.words())?;
        let st = Placed { base, ..st };
        staging = Some(base);
        let mut done = std::collections::HashSet::new();
        for (t, kt) in need {
            let width = (k - kt * LANES).min(LANES);
            for r in t.r0..t.r0 + t.rows {
                let Src::B1 { word, .. } = st.at(r, kt * LANES) else { unreachable!() };
                if done.insert((r, kt)) {
                    runs(width, word, |j| a(r, kt * LANES + j), gathers);
                }
            }
            let Src::B1 { word, .. } = st.at(t.r0, kt * LANES) else { unreachable!() };
            words.insert((t.r0, kt), word);
        }
    }
    Ok(Operand { rows, k, words, staging })
}

fn row_tiles(rows: usize, pool: Option<(usize, usize)>) -> Vec<RowTile> {
    match pool {
        None => (0..rows).step_by(LANES).map(|r0| RowTile { r0, rows: (rows - r0).min(LANES), out0: r0 }).collect(),
        Some((w, s)) => {
            let outs = (rows - w) / s + 1;
            let per = (LANES - w) / s + 1;
            (0..outs)
                .step_by(per)
                .map(|q0| {
                    let m = (outs - q0).min(per);
                    RowTile { r0: q0 * s, rows: (m - 1) * s + w, out0: q0 }
                })
                .collect()
        }
    }
}

const P_EVEN: BankAddr = BankAddr::new(2, 0);
const P_ODD: BankAddr = BankAddr::new(3, 0);

fn partial(kt: usize) -> BankAddr {
    if kt % 2 == 0 {
        P_EVEN
    } else {
        P_ODD
    }
}

pub fn compile_hpe(spec: &ModelSpec, weights: &WeightsFile, cfg: &HpeConfig) -> Result<CompiledProgram, CompileError> {
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    if cfg.array_dim != LANES {
        return Err(CompileError::Unsupported(format!("array dimension {} (compiler tiles by {LANES})", cfg.array_dim)));
    }
    let (out_rows, out_cols) = shapes.last().unwrap().1;
    if out_rows != 1 || out_cols > cfg.output_len.min(LANES) {
        return Err(CompileError::Capacity { resource: "output buffer", used: out_rows * out_cols, capacity: cfg.output_len.min(LANES) });
    }
    if spec.input_len > cfg.input_bytes {
        return Err(CompileError::Capacity { resource: "input buffer", used: spec.input_len, capacity: cfg.input_bytes });
    }
    let params = weights.per_layer(spec);
    let slots = table_slots(spec.layers.iter().filter_map(Layer::act))?;
    let table_of = |k: ActKind| slots.iter().position(|s| *s == k).unwrap() as u8;

    let mut bld = Builder {
        bundles: vec![VliwBundle::compute(ComputeOp::Start { input_len: spec.input_len as u8 })],
        pimg: ParamImage::default(),
        tiles: HashMap::new(),
        last_mm: 0,
        last_bias: 0,
        alloc: Alloc { cap: cfg.bank_words, used: Vec::new() },
        layout: Vec::new(),
        last_written: None,
    };
    let mut cur = Act::Input((1, spec.input_len));

    let mut li = 0;
    while li < spec.layers.len() {
        let layer = spec.layers[li];
        let p = params[li];
        let p_start = bld.pimg.bytes.len();
        let (next, consumed) = match layer {
            Layer::Maxpool1d { .. } => {
                return Err(CompileError::Unsupported(format!("layer {li}: max-pool must directly follow a conv1d")));
            }
            Layer::Dense { inputs, outputs, act } => {
                let a = |_r: usize, c: usize| cur.view(inputs, 0, c);
                let out = Placed { base: 0, rows: 1, cols: outputs };
                (lower_gemm(&mut bld, li, p.unwrap(), &a, 1, inputs, out, None, table_of(act))?, 1)
            }
            Layer::Conv1d { in_ch, kernel, stride, act, out_ch } => {
                let conv_rows = shapes[li].1 .0;
                let pool = match spec.layers.get(li + 1) {
                    Some(&Layer::Maxpool1d { window, stride }) => {
                        if window > LANES || stride > u8::MAX as usize {
                            return Err(CompileError::Unsupported(format!("pool window {window} stride {stride}")));
                        }
                        Some((window, stride))
                    }
                    _ => None,
                };
                let out_shape = if pool.is_some() { shapes[li + 1].1 } else { shapes[li].1 };
                let a = |r: usize, c: usize| cur.view(in_ch, r * stride + c / in_ch, c % in_ch);
                let out = Placed { base: 0, rows: out_shape.0, cols: out_ch };
                let n = lower_gemm(&mut bld, li, p.unwrap(), &a, conv_rows, kernel * in_ch, out, pool, table_of(act))?;
                (n, if pool.is_some() { 2 } else { 1 })
            }
            Layer::Rnn { inputs, hidden, act, timesteps } => {
                (lower_rnn(&mut bld, li, p.unwrap(), cur, inputs, hidden, timesteps, table_of(act))?, 1)
            }
        };
        if let Act::Bank(prev) = cur {
            bld.alloc.free(prev.base);
        }
        bld.layout.push(Region {
            layer: Some(li),
            space: "pcache".into(),
            what: "weights+bias".into(),
            start: p_start,
            len: bld.pimg.bytes.len() - p_start,
        });
        bld.layout.push(Region { layer: Some(li), space: "bank1".into(), what: "output".into(), start: next.base, len: next.words() });
        cur = Act::Bank(next);
        li += consumed;
    }

    let Act::Bank(last) = cur else { unreachable!("at least one layer") };
    let fin = VliwBundle {
        compute: ComputeOp::Fin,
        data: DataOp::Str { src: loc(last.base, 0), len: out_cols as u8, out: 0 },
        ..Default::default()
    };
    bld.bundles.push(fin);

    if bld.pimg.bytes.len() > cfg.pcache_bytes {
        return Err(CompileError::Capacity { resource: "pCache", used: bld.pimg.bytes.len(), capacity: cfg.pcache_bytes });
    }
    let code = bld.bundles.len() * Target::Hpe.bundle_bytes();
    if code > cfg.icache_bytes {
        return Err(CompileError::Capacity { resource: "iCache", used: code, capacity: cfg.icache_bytes });
    }
    let mut img = ProgramImage::new(Target::Hpe);
    img.bundles = bld.bundles;
    img.param_image = bld.pimg.bytes;
    install_tables(&mut img, &slots);
    let diags = isa::validate(&img, &PeConfig::Hpe(cfg.clone()));
    assert!(diags.is_empty(), "compiler emitted an invalid HPE program: {diags:?}");
    let predicted_cycles = predict_cycles(&img, cfg).0;
    Ok(CompiledProgram { image: img, layout: bld.layout, predicted_cycles })
}

/// Emits `act(A . W + b)` for operand `a` of `rows x k`, writing `out`
/// (pooled rows when `pool` is set). Returns the placed output.
#[allow(clippy::too_many_arguments)]
fn lower_gemm(
    bld: &mut Builder,
    li: usize,
    p: &LayerParams,
    a: &dyn Fn(usize, usize) -> Src,
    rows: usize,
    k: usize,
    out: Placed,
    pool: Option<(usize, usize)>,
    table: u8,
) -> Result<Placed, CompileError> {
    let tiles = row_tiles(rows, pool);
    let mut gathers = Vec::new();
    let op = plan_operand(bld, rows, k, &tiles, a, &mut gathers)?;
    bld.gather(gathers);
    let out = Placed { base: bld.alloc.take(out.words())?, ..out };
    let (kts, cts) = (op.k.div_ceil(LANES), out.cols.div_ceil(LANES));
    let mut last = 0;
    for t in &tiles {
        for ct in 0..cts {
            let cols = (out.cols - ct * LANES).min(LANES);
            for kt in 0..kts {
                let wr = (op.k - kt * LANES).min(LANES);
                let addr = bld.weight_tile((li, 0, kt, ct), p, kt * LANES, wr, ct * LANES, cols);
                let acc = (kt > 0).then(|| partial(kt - 1));
                bld.mm(op.words[&(t.r0, kt)], t.rows, partial(kt), acc, (addr, wr, cols));
            }
            let bias = bld.bias_tile(li, p, ct);
            let Src::B1 { word, .. } = out.at(t.out0, ct * LANES) else { unreachable!() };
            let pool = pool.map(|(w, s)| Pool { window: w as u8, stride: s as u8 });
            bld.merge(partial(kts - 1), t.rows, word, table, pool, bias);
            last = word;
        }
    }
    debug_assert_eq!(op.rows, rows);
    if let Some(s) = op.staging {
        bld.alloc.free(s);
    }
    bld.last_written = Some(last);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn lower_rnn(
    bld: &mut Builder,
    li: usize,
    p: &LayerParams,
    cur: Act,
    inputs: usize,
    hidden: usize,
    steps: usize,
    table: u8,
) -> Result<Placed, CompileError> {
    let tiles: Vec<RowTile> = (0..steps).map(|t| RowTile { r0: t, rows: 1, out0: 0 }).collect();
    let a = |r: usize, c: usize| cur.view(inputs, r, c);
    let mut gathers = Vec::new();
    let op = plan_operand(bld, steps, inputs, &tiles, &a, &mut gathers)?;
    bld.gather(gathers);
    let h = Placed { base: 0, rows: 1, cols: hidden };
    let mut regions = [Placed { base: bld.alloc.take(h.words())?, ..h }, Placed { base: bld.alloc.take(h.words())?, ..h }];
    let (xts, hts, cts) = (inputs.div_ceil(LANES), hidden.div_ceil(LANES), hidden.div_ceil(LANES));
    let mut last = 0;
    for t in 0..steps {
        let (prev, next) = (regions[0], regions[1]);
        for ct in 0..cts {
            let cols = (hidden - ct * LANES).min(LANES);
            let mut chain = 0;
            for kt in 0..xts {
                let wr = (inputs - kt * LANES).min(LANES);
                let addr = bld.weight_tile((li, 0, kt, ct), p, kt * LANES, wr, ct * LANES, cols);
                let acc = (chain > 0).then(|| partial(chain - 1));
                bld.mm(op.words[&(t, kt)], 1, partial(chain), acc, (addr, wr, cols));
                chain += 1;
            }
            // The initial hidden state is zero, so the first step skips the recurrent tiles.
            for kt in (0..hts).filter(|_| t > 0) {
                let wr = (hidden - kt * LANES).min(LANES);
                let addr = bld.weight_tile((li, 1, kt, ct), p, inputs + kt * LANES, wr, ct * LANES, cols);
                let Src::B1 { word, .. } = prev.at(0, kt * LANES) else { unreachable!() };
                let acc = (chain > 0).then(|| partial(chain - 1));
                bld.mm(word, 1, partial(chain), acc, (addr, wr, cols));
                chain += 1;
            }
            let bias = bld.bias_tile(li, p, ct);
            let Src::B1 { word, .. } = next.at(0, ct * LANES) else { unreachable!() };
            bld.merge(partial(chain - 1), 1, word, table, None, bias);
            last = word;
        }
        regions.swap(0, 1);
    }
    if let Some(s) = op.staging {
        bld.alloc.free(s);
    }
    bld.alloc.free(regions[1].base);
    bld.last_written = Some(last);
    Ok(regions[0])
}
