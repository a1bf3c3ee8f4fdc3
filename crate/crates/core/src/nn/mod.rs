//! Lowering of layer-structured networks into PE programs.
//!
//! A [`ModelSpec`] is a TOML document:
//!
//! ```toml
//! version = 1
//! name = "mlp"
//! target = "fpe"
//! input_len = 64
//!
//! [[layers]]
//! kind = "dense"
//! in = 64
//! out = 40
//! act = "relu"
//! ```
//!
//! Layer kinds are `dense` (`in`, `out`, `act`), `conv1d` (`in_ch`, `out_ch`,
//! `kernel`, `stride`, `act`), `maxpool1d` (`window`, `stride`) and `rnn`
//! (`in`, `hidden`, `act`, `timesteps`).
//!
//! Activations flow between layers as row-major matrices. The model input is a
//! single row of `input_len` elements; a layer that needs rows of a given width
//! reshapes a single-row input into them.

mod fixtures;
mod lower_fpe;
mod lower_hpe;
mod oracle;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fix8::ActKind;
use crate::isa::{ProgramImage, Target};

pub use fixtures::{fixture, fixture_names, random_model, Fixture};
pub use oracle::oracle;
pub use weights::{model_hash, LayerParams, WeightsFile, WEIGHTS_MAGIC, WEIGHTS_VERSION};

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
        act: ActKind,
    },
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        act: ActKind,
    },
    Maxpool1d {
        window: usize,
        stride: usize,
    },
    Rnn {
        #[serde(rename = "in")]
        inputs: usize,
        hidden: usize,
        act: ActKind,
        timesteps: usize,
    },
}

fn one() -> usize {
    1
}

impl Layer {
    /// `(rows, cols)` of the layer's weight matrix, or `None` for parameter-free layers.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Dense { inputs, outputs, .. } => Some((inputs, outputs)),
            Layer::Conv1d { in_ch, out_ch, kernel, .. } => Some((kernel * in_ch, out_ch)),
            Layer::Maxpool1d { .. } => None,
            Layer::Rnn { inputs, hidden, .. } => Some((inputs + hidden, hidden)),
        }
    }

    pub fn act(&self) -> Option<ActKind> {
        match *self {
            Layer::Dense { act, .. } | Layer::Conv1d { act, .. } | Layer::Rnn { act, .. } => Some(act),
            Layer::Maxpool1d { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv1d { .. } => "conv1d",
            Layer::Maxpool1d { .. } => "maxpool1d",
            Layer::Rnn { .. } => "rnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub version: u32,
    pub name: String,
    pub target: Target,
    pub input_len: usize,
    pub layers: Vec<Layer>,
}

/// Matrix shape of an activation, `(rows, cols)`.
pub type Shape = (usize, usize);

/// Reshape `s` into rows of `width`: unchanged if it already has that width,
/// otherwise only a single row may be split.
fn rows_of(s: Shape, width: usize) -> Option<usize> {
    if width == 0 {
        None
    } else if s.1 == width {
        Some(s.0)
    } else if s.0 == 1 && s.1 % width == 0 {
        Some(s.1 / width)
    } else {
        None
    }
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self, CompileError> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| CompileError::Spec(e.to_string()))?;
        spec.shapes()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model specs always serialize")
    }

    /// Input and output shape of every layer; fails if adjacent layers do not chain.
    pub fn shapes(&self) -> Result<Vec<(Shape, Shape)>, CompileError> {
        let bad = |i: usize, msg: String| CompileError::Spec(format!("layer {i}: {msg}"));
        if self.version != SPEC_VERSION {
            return Err(CompileError::Spec(format!("unsupported model version {}", self.version)));
        }
        if !matches!(self.input_len, 32 | 64) {
            return Err(CompileError::Spec(format!("input_len must be 32 or 64, got {}", self.input_len)));
        }
        if self.layers.is_empty() {
            return Err(CompileError::Spec("model has no layers".into()));
        }
        let mut cur: Shape = (1, self.input_len);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let next = match *l {
                Layer::Dense { inputs, outputs, .. } => {
                    if inputs == 0 || outputs == 0 || inputs != cur.0 * cur.1 {
                        return Err(bad(i, format!("dense expects {inputs} inputs, previous layer gives {}x{}", cur.0, cur.1)));
                    }
                    (1, outputs)
                }
                Layer::Conv1d { in_ch, out_ch, kernel, stride, .. } => {
                    let len = rows_of(cur, in_ch)
                        .ok_or_else(|| bad(i, format!("cannot view {}x{} as {in_ch}-channel positions", cur.0, cur.1)))?;
                    if out_ch == 0 || kernel == 0 || stride == 0 || kernel > len {
                        return Err(bad(i, format!("conv kernel {kernel} stride {stride} over {len} positions")));
                    }
                    ((len - kernel) / stride + 1, out_ch)
                }
                Layer::Maxpool1d { window, stride } => {
                    if window == 0 || stride == 0 || window > cur.0 {
                        return Err(bad(i, format!("pool window {window} stride {stride} over {} rows", cur.0)));
                    }
                    ((cur.0 - window) / stride + 1, cur.1)
                }
                Layer::Rnn { inputs, hidden, timesteps, .. } => {
                    if hidden == 0 || timesteps == 0 || rows_of(cur, inputs) != Some(timesteps) {
                        return Err(bad(i, format!("rnn of {timesteps} steps x {inputs} inputs over {}x{}", cur.0, cur.1)));
                    }
                    (1, hidden)
                }
            };
            out.push((cur, next));
            cur = next;
        }
        Ok(out)
    }

    /// Shape of the final activation.
    pub fn output_shape(&self) -> Result<Shape, CompileError> {
        Ok(self.shapes()?.last().expect("non-empty").1)
    }

    /// Total parameter bytes: weights plus one bias byte per output column.
    pub fn param_bytes(&self) -> usize {
        self.layers.iter().filter_map(Layer::weight_shape).map(|(r, c)| r * c + c).sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompileError {
    #[error("invalid model: {0}")]
    Spec(String),
    #[error("weights do not match the model: {0}")]
    Weights(String),
    #[error("{resource} overflow: needs {used}, capacity {capacity}")]
    Capacity { resource: &'static str, used: usize, capacity: usize },
    #[error("not supported on this target: {0}")]
    Unsupported(String),
}

/// Where the compiler put a piece of a layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub layer: Option<usize>,
    /// `pcache`, `regfile` or `bank1`.
    pub space: String,
    pub what: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledProgram {
    pub image: ProgramImage,
    pub layout: Vec<Region>,
    pub predicted_cycles: u64,
}

pub use lower_fpe::compile_fpe;
pub use lower_hpe::compile_hpe;

/// Compiles for the default configuration of the spec's target.
pub fn compile(spec: &ModelSpec, weights: &WeightsFile) -> Result<CompiledProgram, CompileError> {
    match spec.target {
        Target::Fpe => compile_fpe(spec, weights, &Default::default()),
        Target::Hpe => compile_hpe(spec, weights, &Default::default()),
    }
}

#[cfg(test)]
mod tests;
