//! KWGT parameter files.
//!
//! Little-endian layout: `"KWGT"`, u8 version, u16 layer count, u64 model hash,
//! then per parametrized layer u16 rows, u16 cols, `rows * cols` weight bytes
//! (row-major) and `cols` bias bytes.

use rand::Rng;

use super::{CompileError, ModelSpec};
use crate::blocked::Fix8Matrix;
use crate::fix8::Fix8;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"KWGT";
pub const WEIGHTS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub weights: Fix8Matrix,
    pub bias: Vec<Fix8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightsFile {
    pub hash: u64,
    pub layers: Vec<LayerParams>,
}

/// FNV-1a over the u16 LE rows and cols of each parametrized layer.
pub fn model_hash(shapes: impl IntoIterator<Item = (usize, usize)>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (r, c) in shapes {
        for b in (r as u16).to_le_bytes().into_iter().chain((c as u16).to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn spec_shapes(spec: &ModelSpec) -> Vec<(usize, usize)> {
    spec.layers.iter().filter_map(|l| l.weight_shape()).collect()
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CompileError> {
        let s = self.b.get(self.at..self.at + n).ok_or_else(|| CompileError::Weights(format!("truncated {what}")))?;
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<usize, CompileError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize)
    }
}

impl WeightsFile {
    /// Random parameters for `spec`, each element drawn uniformly from `[-mag, mag)` raw steps.
    pub fn random(spec: &ModelSpec, mag: i8, rng: &mut impl Rng) -> Self {
        let mut el = || Fix8::from_bits(rng.gen_range(-mag..mag) as u8);
        let layers = spec_shapes(spec)
            .into_iter()
            .map(|(r, c)| LayerParams { weights: Fix8Matrix::from_fn(r, c, |_, _| el()), bias: (0..c).map(|_| el()).collect() })
            .collect();
        WeightsFile { hash: model_hash(spec_shapes(spec)), layers }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        out.push(WEIGHTS_VERSION);
        out.extend((self.layers.len() as u16).to_le_bytes());
        out.extend(self.hash.to_le_bytes());
        for l in &self.layers {
            out.extend((l.weights.rows() as u16).to_le_bytes());
            out.extend((l.weights.cols() as u16).to_le_bytes());
            out.extend(l.weights.elems().iter().map(|x| x.bits()));
            out.extend(l.bias.iter().map(|x| x.bits()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CompileError> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4, "magic")? != WEIGHTS_MAGIC {
            return Err(CompileError::Weights("bad magic".into()));
        }
        let v = r.take(1, "version")?[0];
        if v != WEIGHTS_VERSION {
            return Err(CompileError::Weights(format!("unsupported version {v}")));
        }
        let n = r.u16("layer count")?;
        let hash = u64::from_le_bytes(r.take(8, "hash")?.try_into().unwrap());
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let (rows, cols) = (r.u16("rows")?, r.u16("cols")?);
            let w = r.take(rows * cols, "weights")?.iter().map(|&b| Fix8::from_bits(b)).collect();
            let bias = r.take(cols, "bias")?.iter().map(|&b| Fix8::from_bits(b)).collect();
            let weights = Fix8Matrix::new(rows, cols, w).map_err(|e| CompileError::Weights(e.to_string()))?;
            layers.push(LayerParams { weights, bias });
        }
        if r.at != bytes.len() {
            return Err(CompileError::Weights(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(WeightsFile { hash, layers })
    }

    /// Checks shapes and hash against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<(), CompileError> {
        let want = spec_shapes(spec);
        let got: Vec<_> = self.layers.iter().map(|l| (l.weights.rows(), l.weights.cols())).collect();
        if want != got {
            return Err(CompileError::Weights(format!("model expects layer shapes {want:?}, file has {got:?}")));
        }
        if self.hash != model_hash(want) {
            return Err(CompileError::Weights(format!("hash {:016x} does not match the model", self.hash)));
        }
        if let Some(l) = self.layers.iter().find(|l| l.bias.len() != l.weights.cols()) {
            return Err(CompileError::Weights(format!("bias of {} for {} columns", l.bias.len(), l.weights.cols())));
        }
        Ok(())
    }

    /// Parameters of each model layer, `None` for parameter-free ones.
    pub(crate) fn per_layer<'a>(&'a self, spec: &ModelSpec) -> Vec<Option<&'a LayerParams>> {
        let mut it = self.layers.iter();
        spec.layers.iter().map(|l| l.weight_shape().and_then(|_| it.next())).collect()
    }
}
