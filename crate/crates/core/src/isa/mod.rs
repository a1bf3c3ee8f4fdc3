//! FPE and HPE VLIW instruction sets.
//!
//! Every bundle carries three slots: compute, parameter load and data access.
//! Programs are straight-line; `START` opens a program and `FIN` closes it.

mod asm;
mod codec;
pub mod gen;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fix8::ActTable;

pub use asm::{assemble, disassemble, format_bundle};
pub use codec::{decode_binary, decode_bundle, encode_binary, encode_bundle};
pub use validate::{validate, DiagKind, Diagnostic, PeConfig};

pub const PROGRAM_MAGIC: &[u8; 4] = b"KPRG";
pub const PROGRAM_VERSION: u8 = 1;
pub const ACT_TABLE_SLOTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Fpe,
    Hpe,
}

impl Target {
    /// Encoded bundle width in bytes.
    pub fn bundle_bytes(self) -> usize {
        match self {
            Target::Fpe => 8,
            Target::Hpe => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Fpe => "fpe",
            Target::Hpe => "hpe",
        }
    }

    pub fn default_icache_bytes(self) -> usize {
        match self {
            Target::Fpe => 1024,
            Target::Hpe => 8 * 1024,
        }
    }

    pub fn default_pcache_bytes(self) -> usize {
        match self {
            Target::Fpe => 8 * 1024,
            Target::Hpe => 512 * 1024,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Target {
    type Err = IsaError;
    fn from_str(s: &str) -> Result<Self, IsaError> {
        match s.to_ascii_lowercase().as_str() {
            "fpe" => Ok(Target::Fpe),
            "hpe" => Ok(Target::Hpe),
            other => Err(IsaError::UnknownTarget(other.to_string())),
        }
    }
}

/// A word address inside one of the HPE RAM banks (1..=3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BankAddr {
    pub bank: u8,
    pub word: u16,
}

impl BankAddr {
    pub const fn new(bank: u8, word: u16) -> Self {
        BankAddr { bank, word }
    }
}

impl fmt::Display for BankAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}:{}", self.bank, self.word)
    }
}

/// Element-granular location in temporal storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Loc {
    Reg { word: u8, lane: u8 },
    Bank { bank: u8, word: u16, lane: u8 },
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loc::Reg { word, lane } => write!(f, "r{word}.{lane}"),
            Loc::Bank { bank, word, lane } => write!(f, "b{bank}:{word}.{lane}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pool {
    pub window: u8,
    pub stride: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MergeOp {
    pub a: BankAddr,
    /// Second operand; `None` merges against zero.
    pub b: Option<BankAddr>,
    pub dst: BankAddr,
    pub rows: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ComputeOp {
    #[default]
    Nop,
    Start {
        input_len: u8,
    },
    Fin,
    /// `acc[acc] = regfile[src] x pbuf[pbuf]`
    Mv { src: u8, pbuf: u8, acc: u8 },
    /// `acc[acc] += regfile[src] x pbuf[pbuf]`
    Mva { src: u8, pbuf: u8, acc: u8 },
    /// Like MVA, then requantize, activate and write back `t` elements at `dst.offset`.
    Mvaa { src: u8, pbuf: u8, acc: u8, table: u8, dst: u8, offset: u8 },
    /// Systolic tile product of `rows` source words against the staged weight tile,
    /// plus the partial sums at `acc` when present.
    Mm { src: BankAddr, rows: u8, dst: BankAddr, acc: Option<BankAddr> },
    Acc(MergeOp),
    Acca { m: MergeOp, table: u8, bias: bool },
    Accp { m: MergeOp, table: u8, bias: bool, pool: Pool },
}

impl ComputeOp {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            ComputeOp::Nop => "NOP",
            ComputeOp::Start { .. } => "START",
            ComputeOp::Fin => "FIN",
            ComputeOp::Mv { .. } => "MV",
            ComputeOp::Mva { .. } => "MVA",
            ComputeOp::Mvaa { .. } => "MVAA",
            ComputeOp::Mm { .. } => "MM",
            ComputeOp::Acc(_) => "ACC",
            ComputeOp::Acca { .. } => "ACCA",
            ComputeOp::Accp { .. } => "ACCP",
        }
    }

    /// Target the opcode belongs to; `None` for opcodes shared by both.
    pub fn target(&self) -> Option<Target> {
        match self {
            ComputeOp::Mv { .. } | ComputeOp::Mva { .. } | ComputeOp::Mvaa { .. } => Some(Target::Fpe),
            ComputeOp::Mm { .. } | ComputeOp::Acc(_) | ComputeOp::Acca { .. } | ComputeOp::Accp { .. } => {
                Some(Target::Hpe)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamDst {
    /// FPE parameter buffer.
    Pbuf(u8),
    /// FPE accumulator group (bias preload).
    Acc(u8),
    /// HPE weight staging register.
    Weights,
    /// HPE bias staging register.
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ParamOp {
    #[default]
    Nop,
    /// Loads a compact `rows x cols` row-major block from pCache, zero-filling the rest.
    Ldp { addr: u32, rows: u8, cols: u8, dst: ParamDst },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DataOp {
    #[default]
    Nop,
    LdrInput { offset: u8, len: u8, dst: Loc },
    LdrCopy { src: Loc, len: u8, dst: Loc },
    Str { src: Loc, len: u8, out: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct VliwBundle {
    pub compute: ComputeOp,
    pub param: ParamOp,
    pub data: DataOp,
}

impl VliwBundle {
    pub fn compute(op: ComputeOp) -> Self {
        VliwBundle { compute: op, ..Default::default() }
    }

    pub fn is_nop(&self) -> bool {
        *self == VliwBundle::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramImage {
    pub target: Target,
    pub bundles: Vec<VliwBundle>,
    pub param_image: Vec<u8>,
    pub act_tables: [ActTable; ACT_TABLE_SLOTS],
}

impl ProgramImage {
    pub fn new(target: Target) -> Self {
        ProgramImage {
            target,
            bundles: Vec::new(),
            param_image: Vec::new(),
            act_tables: Default::default(),
        }
    }

    /// Input bytes declared by the leading `START`, if any.
    pub fn input_len(&self) -> Option<usize> {
        match self.bundles.first().map(|b| b.compute) {
            Some(ComputeOp::Start { input_len }) => Some(input_len as usize),
            _ => None,
        }
    }

    pub fn code_bytes(&self) -> usize {
        self.bundles.len() * self.target.bundle_bytes()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: {mnemonic} is not legal in a {target} program")]
    TargetMismatch { line: usize, mnemonic: String, target: Target },
    #[error("{resource} overflow: {used} bytes exceed {capacity}")]
    Capacity { resource: &'static str, used: usize, capacity: usize },
    #[error("program does not end with FIN")]
    MissingFin,
    #[error("bundle {0} follows FIN")]
    AfterFin(usize),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("corrupt encoding in bundle {bundle}: {msg}")]
    Corrupt { bundle: usize, msg: String },
    #[error("operand out of encodable range: {0}")]
    Range(String),
}

#[cfg(test)]
mod tests;
