//! Fix-8 (Q2.5) scalar arithmetic, the wide accumulator and activation lookup tables.
//!
//! A [`Fix8`] is an 8-bit two's-complement word with 5 fractional bits, so its value
//! is `bits / 32` and the representable range is `[-4.0, 3.96875]`. Products of two
//! Fix8 values carry 10 fractional bits and are held exactly in a [`WideAcc`].

use std::fmt;

use serde::{Deserialize, Serialize};

/// Fractional bits of a [`Fix8`].
pub const FIX8_FRAC_BITS: u32 = 5;
/// Fractional bits of a [`WideAcc`].
pub const WIDE_FRAC_BITS: u32 = 10;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Fix8(i8);

impl Fix8 {
    pub const ZERO: Fix8 = Fix8(0);
    pub const ONE: Fix8 = Fix8(32);
    pub const MAX: Fix8 = Fix8(i8::MAX);
    pub const MIN: Fix8 = Fix8(i8::MIN);

    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        Fix8(bits as i8)
    }

    #[inline]
    pub const fn bits(self) -> u8 {
        self.0 as u8
    }

    #[inline]
    pub const fn raw(self) -> i8 {
        self.0
    }

    /// Nearest representable value, ties away from zero, saturating.
    pub fn encode(x: f64) -> Self {
        debug_assert!(x.is_finite(), "Fix8::encode on non-finite input");
        let scaled = (x * 32.0).round();
        Fix8(scaled.clamp(i8::MIN as f64, i8::MAX as f64) as i8)
    }

    #[inline]
    pub fn decode(self) -> f64 {
        self.0 as f64 / 32.0
    }

    /// Exact product with 10 fractional bits.
    #[inline]
    pub fn mul(self, other: Fix8) -> WideAcc {
        WideAcc(self.0 as i32 * other.0 as i32)
    }

    /// Lifts the value into accumulator precision without rounding.
    #[inline]
    pub fn widen(self) -> WideAcc {
        WideAcc((self.0 as i32) << (WIDE_FRAC_BITS - FIX8_FRAC_BITS))
    }
}

impl fmt::Debug for Fix8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fix8({:#04x}={})", self.bits(), self.decode())
    }
}

impl fmt::Display for Fix8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.decode())
    }
}

/// 32-bit accumulator word with 10 fractional bits (Q21.10).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Debug)]
pub struct WideAcc(i32);

impl WideAcc {
    pub const ZERO: WideAcc = WideAcc(0);

    #[inline]
    pub const fn from_bits(bits: i32) -> Self {
        WideAcc(bits)
    }

    #[inline]
    pub const fn bits(self) -> i32 {
        self.0
    }

    #[inline]
    pub fn decode(self) -> f64 {
        self.0 as f64 / 1024.0
    }

    /// Two's-complement wrapping sum. Debug builds panic if the true sum leaves the
    /// 32-bit range.
    #[inline]
    pub fn acc_add(self, other: WideAcc) -> WideAcc {
        debug_assert!(
            self.0.checked_add(other.0).is_some(),
            "WideAcc overflow: {} + {}",
            self.0,
            other.0
        );
        WideAcc(self.0.wrapping_add(other.0))
    }

    #[inline]
    pub fn checked_add(self, other: WideAcc) -> Option<WideAcc> {
        self.0.checked_add(other.0).map(WideAcc)
    }

    /// Round to Q2.5 (ties away from zero) and saturate.
    pub fn requantize(self) -> Fix8 {
        let shift = WIDE_FRAC_BITS - FIX8_FRAC_BITS;
        let half = 1i64 << (shift - 1);
        let v = self.0 as i64;
        let q = if v >= 0 { (v + half) >> shift } else { -((-v + half) >> shift) };
        Fix8(q.clamp(i8::MIN as i64, i8::MAX as i64) as i8)
    }
}

impl std::ops::Add for WideAcc {
    type Output = WideAcc;
    fn add(self, rhs: WideAcc) -> WideAcc {
        self.acc_add(rhs)
    }
}

impl std::iter::Sum for WideAcc {
    fn sum<I: Iterator<Item = WideAcc>>(iter: I) -> WideAcc {
        iter.fold(WideAcc::ZERO, WideAcc::acc_add)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Sigmoid,
    Identity,
    /// Table contents that match none of the built-in functions.
    Custom,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Sigmoid => "sigmoid",
            ActKind::Identity => "identity",
            ActKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for ActKind {
    type Err = UnknownActivation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActKind::Relu),
            "sigmoid" => Ok(ActKind::Sigmoid),
            "identity" | "linear" | "none" => Ok(ActKind::Identity),
            _ => Err(UnknownActivation(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown activation kind `{0}`")]
pub struct UnknownActivation(pub String);

/// A 256-entry activation table indexed by the input's bit pattern.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ActTable {
    kind: ActKind,
    entries: [Fix8; 256],
}

impl ActTable {
    pub fn build(kind: ActKind) -> Result<Self, UnknownActivation> {
        let f: fn(f64) -> f64 = match kind {
            ActKind::Relu => |x| x.max(0.0),
            ActKind::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            ActKind::Identity => |x| x,
            ActKind::Custom => return Err(UnknownActivation("custom".into())),
        };
        let mut entries = [Fix8::ZERO; 256];
        for (b, e) in entries.iter_mut().enumerate() {
            *e = Fix8::encode(f(Fix8::from_bits(b as u8).decode()));
        }
        Ok(ActTable { kind, entries })
    }

    pub fn relu() -> Self {
        Self::build(ActKind::Relu).unwrap()
    }

    pub fn sigmoid() -> Self {
        Self::build(ActKind::Sigmoid).unwrap()
    }

    pub fn identity() -> Self {
        Self::build(ActKind::Identity).unwrap()
    }

    pub fn kind(&self) -> ActKind {
        self.kind
    }

    pub fn entries(&self) -> &[Fix8; 256] {
        &self.entries
    }

    #[inline]
    pub fn activate(&self, a: Fix8) -> Fix8 {
        self.entries[a.bits() as usize]
    }

    pub fn to_bytes(&self) -> [u8; 256] {
        let mut out = [0u8; 256];
        for (o, e) in out.iter_mut().zip(self.entries.iter()) {
            *o = e.bits();
        }
        out
    }

    /// Rebuilds a table from its 256-byte serialization. The kind is recovered by
    /// comparison against the built-in tables.
    pub fn from_bytes(bytes: &[u8; 256]) -> Self {
        let mut entries = [Fix8::ZERO; 256];
        for (e, b) in entries.iter_mut().zip(bytes.iter()) {
            *e = Fix8::from_bits(*b);
        }
        let kind = [ActKind::Identity, ActKind::Relu, ActKind::Sigmoid]
            .into_iter()
            .find(|k| ActTable::build(*k).unwrap().entries == entries)
            .unwrap_or(ActKind::Custom);
        ActTable { kind, entries }
    }
}

impl Default for ActTable {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for ActTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActTable({})", self.kind.name())
    }
}

/// Raw packet bytes map one-to-one onto Fix8 bit patterns.
pub fn bytes_to_fix8(bytes: &[u8]) -> Vec<Fix8> {
    bytes.iter().map(|b| Fix8::from_bits(*b)).collect()
}

pub fn fix8_to_bytes(v: &[Fix8]) -> Vec<u8> {
    v.iter().map(|x| x.bits()).collect()
}
