//! Reference blocked GEMV/GEMM over Fix8.
//!
//! These routines are the arithmetic oracle for both PE simulators. Accumulation
//! happens in [`WideAcc`] and each output element is requantized exactly once,
//! right before its activation lookup.

use thiserror::Error;

use crate::fix8::{ActTable, Fix8, WideAcc};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("zero dimension in block plan ({0})")]
    ZeroDimension(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad matrix fixture: {0}")]
    BadFixture(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fix8Vector {
    elems: Vec<Fix8>,
    logical_len: usize,
}

impl Fix8Vector {
    pub fn new(elems: Vec<Fix8>) -> Self {
        let logical_len = elems.len();
        Fix8Vector { elems, logical_len }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![Fix8::ZERO; len])
    }

    /// Logical elements only, without padding.
    pub fn as_slice(&self) -> &[Fix8] {
        &self.elems[..self.logical_len]
    }

    pub fn padded(&self) -> &[Fix8] {
        &self.elems
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    /// Zero-pads up to the next multiple of `block`.
    pub fn pad(&self, block: usize) -> Fix8Vector {
        let target = self.logical_len.div_ceil(block) * block;
        let mut elems = self.as_slice().to_vec();
        elems.resize(target, Fix8::ZERO);
        Fix8Vector { elems, logical_len: self.logical_len }
    }

    pub fn into_vec(mut self) -> Vec<Fix8> {
        self.elems.truncate(self.logical_len);
        self.elems
    }
}

impl From<Vec<Fix8>> for Fix8Vector {
    fn from(v: Vec<Fix8>) -> Self {
        Fix8Vector::new(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fix8Matrix {
    rows: usize,
    cols: usize,
    elems: Vec<Fix8>,
}

impl Fix8Matrix {
    pub fn new(rows: usize, cols: usize, elems: Vec<Fix8>) -> Result<Self, LinalgError> {
        if elems.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                elems.len()
            )));
        }
        Ok(Fix8Matrix { rows, cols, elems })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Fix8Matrix { rows, cols, elems: vec![Fix8::ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Fix8::ONE);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Fix8) -> Self {
        let mut elems = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                elems.push(f(r, c));
            }
        }
        Fix8Matrix { rows, cols, elems }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn elems(&self) -> &[Fix8] {
        &self.elems
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Fix8 {
        self.elems[r * self.cols + c]
    }

    /// Element access that reads zero outside the stored bounds.
    #[inline]
    pub fn get_padded(&self, r: usize, c: usize) -> Fix8 {
        if r < self.rows && c < self.cols {
            self.get(r, c)
        } else {
            Fix8::ZERO
        }
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Fix8) {
        self.elems[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Fix8] {
        &self.elems[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy with zero rows/cols appended.
    pub fn pad_to(&self, rows: usize, cols: usize) -> Fix8Matrix {
        Fix8Matrix::from_fn(rows.max(self.rows), cols.max(self.cols), |r, c| self.get_padded(r, c))
    }

    /// Appends `row` as a new last row.
    pub fn with_row(&self, row: &[Fix8]) -> Result<Fix8Matrix, LinalgError> {
        if row.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "row of {} for {} columns",
                row.len(),
                self.cols
            )));
        }
        let mut elems = self.elems.clone();
        elems.extend_from_slice(row);
        Ok(Fix8Matrix { rows: self.rows + 1, cols: self.cols, elems })
    }

    /// `KMAT` fixture: magic, u16 rows, u16 cols (little-endian), row-major bytes.
    pub fn to_kmat(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.elems.len());
        out.extend_from_slice(b"KMAT");
        out.extend_from_slice(&(self.rows as u16).to_le_bytes());
        out.extend_from_slice(&(self.cols as u16).to_le_bytes());
        out.extend(self.elems.iter().map(|e| e.bits()));
        out
    }

    pub fn from_kmat(bytes: &[u8]) -> Result<Self, LinalgError> {
        if bytes.len() < 8 || &bytes[..4] != b"KMAT" {
            return Err(LinalgError::BadFixture("missing KMAT header".into()));
        }
        let rows = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let cols = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols {
            return Err(LinalgError::BadFixture(format!(
                "expected {} body bytes, found {}",
                rows * cols,
                body.len()
            )));
        }
        Fix8Matrix::new(rows, cols, body.iter().map(|b| Fix8::from_bits(*b)).collect())
    }
}

/// Tiling of an `(1, N) x (N, Q)` product onto a PE that natively consumes
/// `(1, a) x (a, b)` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub n: usize,
    pub q: usize,
    /// Rows consumed per block.
    pub a: usize,
    /// Columns produced per block.
    pub b: usize,
    /// Input blocks.
    pub x: usize,
    /// Output blocks.
    pub y: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

pub fn plan_blocks(n: usize, q: usize, a: usize, b: usize) -> Result<BlockPlan, LinalgError> {
    for (v, name) in [(n, "N"), (q, "Q"), (a, "a"), (b, "b")] {
        if v == 0 {
            return Err(LinalgError::ZeroDimension(name));
        }
    }
    let x = n.div_ceil(a);
    let y = q.div_ceil(b);
    Ok(BlockPlan { n, q, a, b, x, y, pad_rows: a * x - n, pad_cols: b * y - q })
}

fn finish(acc: WideAcc, act: &ActTable) -> Fix8 {
    act.activate(acc.requantize())
}

/// Unblocked `act(requantize(v . M))`.
pub fn gemv_ref(v: &Fix8Vector, m: &Fix8Matrix, act: &ActTable) -> Result<Fix8Vector, LinalgError> {
    let v = v.as_slice();
    if v.len() != m.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "vector of {} against {}x{} matrix",
            v.len(),
            m.rows(),
            m.cols()
        )));
    }
    let out = (0..m.cols())
        .map(|j| {
            let acc: WideAcc = v.iter().enumerate().map(|(i, vi)| vi.mul(m.get(i, j))).sum();
            finish(acc, act)
        })
        .collect();
    Ok(Fix8Vector::new(out))
}

/// Pre-activation accumulators of the blocked product, one per padded output column.
pub fn gemv_blocked_acc(v: &Fix8Vector, m: &Fix8Matrix, plan: &BlockPlan) -> Result<Vec<WideAcc>, LinalgError> {
    if plan.n != v.logical_len() || plan.n != m.rows() || plan.q != m.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "plan {}x{} against vector {} and matrix {}x{}",
            plan.n,
            plan.q,
            v.logical_len(),
            m.rows(),
            m.cols()
        )));
    }
    let vp = v.pad(plan.a);
    let vp = vp.padded();
    let mut acc = vec![WideAcc::ZERO; plan.b * plan.y];
    // output block outer, input block inner
    for j in 0..plan.y {
        for i in 0..plan.x {
            let seg = &vp[i * plan.a..(i + 1) * plan.a];
            for c in 0..plan.b {
                let col = j * plan.b + c;
                let part: WideAcc = seg
                    .iter()
                    .enumerate()
                    .map(|(r, vr)| vr.mul(m.get_padded(i * plan.a + r, col)))
                    .sum();
                acc[col] = acc[col] + part;
            }
        }
    }
    Ok(acc)
}

pub fn gemv_blocked(
    v: &Fix8Vector,
    m: &Fix8Matrix,
    plan: &BlockPlan,
    act: &ActTable,
) -> Result<Fix8Vector, LinalgError> {
    let acc = gemv_blocked_acc(v, m, plan)?;
    Ok(Fix8Vector::new(acc[..plan.q].iter().map(|a| finish(*a, act)).collect()))
}

pub fn gemm_ref(a: &Fix8Matrix, b: &Fix8Matrix, act: &ActTable) -> Result<Fix8Matrix, LinalgError> {
    if a.cols() != b.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut elems = Vec::with_capacity(a.rows() * b.cols());
    for p in 0..a.rows() {
        let row = gemv_ref(&Fix8Vector::new(a.row(p).to_vec()), b, act)?;
        elems.extend_from_slice(row.as_slice());
    }
    Fix8Matrix::new(a.rows(), b.cols(), elems)
}

/// Blocked GEMM with `(tile_k, tile_n)` weight tiles, as executed on a systolic array.
pub fn gemm_blocked(
    a: &Fix8Matrix,
    b: &Fix8Matrix,
    tile_k: usize,
    tile_n: usize,
    act: &ActTable,
) -> Result<Fix8Matrix, LinalgError> {
    if a.cols() != b.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let plan = plan_blocks(b.rows(), b.cols(), tile_k, tile_n)?;
    let mut elems = Vec::with_capacity(a.rows() * b.cols());
    for p in 0..a.rows() {
        let row = gemv_blocked(&Fix8Vector::new(a.row(p).to_vec()), b, &plan, act)?;
        elems.extend_from_slice(row.as_slice());
    }
    Fix8Matrix::new(a.rows(), b.cols(), elems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Fix8Vector {
        Fix8Vector::new((0..n).map(|_| Fix8::from_bits(rng.gen())).collect())
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Fix8Matrix {
        Fix8Matrix::from_fn(r, c, |_, _| Fix8::from_bits(rng.gen()))
    }

    // independent scalar triple loop in i64
    fn scalar_oracle(v: &[Fix8], m: &Fix8Matrix, act: &ActTable) -> Vec<Fix8> {
        (0..m.cols())
            .map(|j| {
                let s: i64 = (0..v.len()).map(|i| v[i].raw() as i64 * m.get(i, j).raw() as i64).sum();
                act.activate(WideAcc::from_bits(s as i32).requantize())
            })
            .collect()
    }

    #[test]
    fn plan_examples() {
        let p = plan_blocks(32, 8, 32, 8).unwrap();
        assert_eq!((p.x, p.y, p.pad_rows, p.pad_cols), (1, 1, 0, 0));
        let p = plan_blocks(40, 10, 32, 8).unwrap();
        assert_eq!((p.x, p.y, p.pad_rows, p.pad_cols), (2, 2, 24, 6));
        let p = plan_blocks(64, 128, 32, 8).unwrap();
        assert_eq!((p.x, p.y), (2, 16));
        assert_eq!(plan_blocks(0, 8, 32, 8), Err(LinalgError::ZeroDimension("N")));
    }

    #[test]
    fn gemv_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_vec(&mut rng, 24);
        let id = ActTable::identity();
        assert_eq!(gemv_ref(&v, &Fix8Matrix::identity(24), &id).unwrap(), v);
        let z = gemv_ref(&v, &Fix8Matrix::zeros(24, 5), &id).unwrap();
        assert!(z.as_slice().iter().all(|x| *x == Fix8::ZERO));
    }

    #[test]
    fn gemv_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = rand_vec(&mut rng, 64);
        let m = rand_mat(&mut rng, 64, 24);
        let relu = ActTable::relu();
        assert_eq!(gemv_ref(&v, &m, &relu).unwrap().into_vec(), scalar_oracle(v.as_slice(), &m, &relu));
    }

    #[test]
    fn gemv_dimension_mismatch() {
        let v = Fix8Vector::zeros(3);
        assert!(gemv_ref(&v, &Fix8Matrix::zeros(4, 2), &ActTable::identity()).is_err());
        let plan = plan_blocks(4, 2, 32, 8).unwrap();
        assert!(gemv_blocked(&v, &Fix8Matrix::zeros(4, 2), &plan, &ActTable::identity()).is_err());
    }

    #[test]
    fn padded_plan_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_vec(&mut rng, 40);
        let m = rand_mat(&mut rng, 40, 10);
        let plan = plan_blocks(40, 10, 32, 8).unwrap();
        for act in [ActTable::relu(), ActTable::sigmoid(), ActTable::identity()] {
            assert_eq!(gemv_blocked(&v, &m, &plan, &act).unwrap(), gemv_ref(&v, &m, &act).unwrap());
        }
    }

    #[test]
    fn random_shape_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let act = ActTable::relu();
        for _ in 0..200 {
            let n = rng.gen_range(1..=256);
            let q = rng.gen_range(1..=256);
            let v = rand_vec(&mut rng, n);
            let m = rand_mat(&mut rng, n, q);
            let plan = plan_blocks(n, q, 32, 8).unwrap();
            assert_eq!(gemv_blocked(&v, &m, &plan, &act).unwrap(), gemv_ref(&v, &m, &act).unwrap());
        }
    }

    #[test]
    fn gemm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = ActTable::identity();
        let a = rand_mat(&mut rng, 7, 40);
        assert_eq!(gemm_ref(&a, &Fix8Matrix::identity(40), &id).unwrap(), a);

        let b = rand_mat(&mut rng, 40, 10);
        let relu = ActTable::relu();
        assert_eq!(gemm_blocked(&a, &b, 32, 32, &relu).unwrap(), gemm_ref(&a, &b, &relu).unwrap());

        let row = Fix8Matrix::new(1, 40, a.row(0).to_vec()).unwrap();
        let g = gemm_ref(&row, &b, &relu).unwrap();
        let v = gemv_ref(&Fix8Vector::new(a.row(0).to_vec()), &b, &relu).unwrap();
        assert_eq!(g.row(0), v.as_slice());
    }

    #[test]
    fn kmat_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_mat(&mut rng, 3, 5);
        let bytes = m.to_kmat();
        assert_eq!(&bytes[..8], &[b'K', b'M', b'A', b'T', 3, 0, 5, 0]);
        assert_eq!(Fix8Matrix::from_kmat(&bytes).unwrap(), m);
        assert!(Fix8Matrix::from_kmat(&bytes[..10]).is_err());
        assert!(Fix8Matrix::from_kmat(b"XMAT\0\0\0\0").is_err());
    }
}
