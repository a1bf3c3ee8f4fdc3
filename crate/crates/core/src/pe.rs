//! Pieces shared by the FPE and HPE simulators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fix8::Fix8;
use crate::isa::{Diagnostic, Target};

/// Runtime fault. The PE halts; callers record it and carry on.
#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("fault at cycle {cycle}, bundle {pc}: {msg}")]
pub struct Fault {
    pub cycle: u64,
    pub pc: usize,
    pub msg: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PeError {
    #[error("program targets {found}, simulator is {expected}")]
    WrongTarget { expected: Target, found: Target },
    #[error("program rejected: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("input has {got} bytes, program expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error(transparent)]
    Fault(#[from] Fault),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunResult {
    pub output: Vec<Fix8>,
    pub cycles: u64,
    /// Cycles lost to bank port conflicts (always 0 on the FPE).
    pub stall_cycles: u64,
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[Fix8]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if best.is_none_or(|b| *x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// True when `KSCOPE_TRACE=1` is set.
pub fn trace_from_env() -> bool {
    std::env::var("KSCOPE_TRACE").is_ok_and(|v| v == "1")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vec<Fix8> {
        xs.iter().map(|&x| Fix8::encode(x)).collect()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&v(&[0.5, 0.5, 0.25])), Some(0));
        assert_eq!(argmax(&v(&[-1.0, 3.0, 2.0])), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn argmax_matches_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let xs: Vec<Fix8> = (0..6).map(|_| Fix8::from_bits(rng.gen_range(-8i8..8) as u8)).collect();
            let max = xs.iter().map(|x| x.decode()).fold(f64::MIN, f64::max);
            let want = xs.iter().position(|x| x.decode() == max);
            assert_eq!(argmax(&xs), want);
        }
    }
}
