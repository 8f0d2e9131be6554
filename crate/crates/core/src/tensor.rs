//! Dense D-way tensors and the structured products built on them.
//!
//! Storage is column-major: the first index varies fastest, so the raw data
//! buffer *is* `vec(T) = vec(T_(1))`. Mode-d unfolding follows the Kolda–Bader
//! convention: entry `(i_1, …, i_D)` lands in row `i_d` and column
//! `Σ_{k≠d} i_k · J_k` with `J_k = Π_{m<k, m≠d} I_m`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work size above which per-mode fiber sweeps are spread over the rayon pool.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_len(&shape)?;
        if data.len() != n {
            return Err(Error::dims(format!(
                "data length {} does not match shape {:?} (expected {n})",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = checked_len(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            increment_index(&mut idx, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Inverse of [`DenseTensor::vectorize`].
    pub fn from_vector(shape: &[usize], v: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `vec(T)`: the mode-1 unfolding with its columns stacked.
    pub fn vectorize(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        linear_index(&self.shape, idx)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims(format!(
                "shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor must have at least one mode"));
    }
    if let Some(d) = shape.iter().position(|&e| e == 0) {
        return Err(Error::invalid(format!(
            "extent of mode {} is zero in shape {shape:?}",
            d + 1
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))
}

pub(crate) fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for (i, &extent) in idx.iter_mut().zip(shape) {
        *i += 1;
        if *i < extent {
            return;
        }
        *i = 0;
    }
}

pub fn linear_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut stride = 1;
    let mut n = 0;
    for (&i, &extent) in idx.iter().zip(shape) {
        debug_assert!(i < extent);
        n += i * stride;
        stride *= extent;
    }
    n
}

/// Product of the extents before and after mode `d`.
pub(crate) fn mode_strides(shape: &[usize], d: usize) -> (usize, usize) {
    let left = shape[..d].iter().product();
    let right = shape[d + 1..].iter().product();
    (left, right)
}

/// Row and column of linear offset `n` in the mode-`d` unfolding.
#[inline]
pub(crate) fn unfold_position(n: usize, left: usize, extent: usize) -> (usize, usize) {
    let row = (n / left) % extent;
    let col = n % left + left * (n / (left * extent));
    (row, col)
}

fn check_mode(d: usize, ndim: usize) -> Result<()> {
    if d >= ndim {
        return Err(Error::ModeOutOfRange { mode: d, ndim });
    }
    Ok(())
}

/// Mode-`d` unfolding (0-based mode) into an `I_d × N/I_d` matrix.
pub fn unfold(t: &DenseTensor, d: usize) -> Result<DMatrix<f64>> {
    check_mode(d, t.ndim())?;
    let extent = t.shape[d];
    let (left, _) = mode_strides(&t.shape, d);
    let cols = t.len() / extent;
    let mut m = DMatrix::zeros(extent, cols);
    for (n, &v) in t.data.iter().enumerate() {
        let (row, col) = unfold_position(n, left, extent);
        m[(row, col)] = v;
    }
    Ok(m)
}

/// Inverse of [`unfold`].
pub fn fold(m: &DMatrix<f64>, d: usize, shape: &[usize]) -> Result<DenseTensor> {
    let n = checked_len(shape)?;
    check_mode(d, shape.len())?;
    let extent = shape[d];
    if m.nrows() != extent || m.ncols() * extent != n {
        return Err(Error::dims(format!(
            "cannot fold a {}x{} matrix along mode {} into shape {shape:?}",
            m.nrows(),
            m.ncols(),
            d + 1
        )));
    }
    let (left, _) = mode_strides(shape, d);
    let data = (0..n)
        .map(|k| {
            let (row, col) = unfold_position(k, left, extent);
            m[(row, col)]
        })
        .collect();
    DenseTensor::new(shape.to_vec(), data)
}

/// Column-wise Kronecker product `M_1 ⊙ M_2 ⊙ ⋯ ⊙ M_k`.
///
/// Row index of the result runs fastest over the *last* matrix, matching
/// `a ⊗ b` for each column pair.
pub fn khatri_rao(matrices: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::invalid("khatri_rao needs at least one matrix"))?;
    let r = first.ncols();
    if let Some(bad) = matrices.iter().find(|m| m.ncols() != r) {
        return Err(Error::dims(format!(
            "khatri_rao column counts differ: {r} vs {}",
            bad.ncols()
        )));
    }
    let mut acc = (*first).clone();
    for m in &matrices[1..] {
        let rows = acc.nrows() * m.nrows();
        let mut next = DMatrix::zeros(rows, r);
        for c in 0..r {
            for i in 0..acc.nrows() {
                let a = acc[(i, c)];
                for j in 0..m.nrows() {
                    next[(i * m.nrows() + j, c)] = a * m[(j, c)];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// The D latent factor matrices `U_d ∈ ℝ^{I_d × R}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    factors: Vec<DMatrix<f64>>,
}

impl FactorSet {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = factors.first().ok_or_else(|| Error::invalid("factor set is empty"))?;
        let r = first.ncols();
        if factors.iter().any(|f| f.ncols() != r) {
            return Err(Error::dims("factor matrices must share a column count"));
        }
        Ok(Self { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn ndim(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn factor(&self, d: usize) -> &DMatrix<f64> {
        &self.factors[d]
    }

    pub fn set_factor(&mut self, d: usize, u: DMatrix<f64>) -> Result<()> {
        let old = &self.factors[d];
        if u.shape() != old.shape() {
            return Err(Error::dims(format!(
                "replacement factor is {:?}, expected {:?}",
                u.shape(),
                old.shape()
            )));
        }
        self.factors[d] = u;
        Ok(())
    }

    /// `U_D ⊙ ⋯ ⊙ U_{d+1} ⊙ U_{d−1} ⊙ ⋯ ⊙ U_1`, the `N/I_d × R` design matrix
    /// whose row `j` matches column `j` of the mode-`d` unfolding.
    pub fn khatri_rao_except(&self, d: usize) -> Result<DMatrix<f64>> {
        let mats: Vec<&DMatrix<f64>> = self
            .factors
            .iter()
            .enumerate()
            .rev()
            .filter(|&(k, _)| k != d)
            .map(|(_, f)| f)
            .collect();
        if mats.is_empty() {
            return Ok(DMatrix::from_element(1, self.rank(), 1.0));
        }
        khatri_rao(&mats)
    }
}

/// `Σ_r u_1^r ∘ ⋯ ∘ u_D^r`.
pub fn cp_reconstruct(f: &FactorSet) -> Result<DenseTensor> {
    let shape = f.shape();
    // M_(1) = U_1 (U_D ⊙ ⋯ ⊙ U_2)ᵀ, whose column-major storage is vec(M).
    let h = f.khatri_rao_except(0)?;
    let m1 = f.factor(0) * h.transpose();
    DenseTensor::new(shape, m1.as_slice().to_vec())
}

/// A square operator that can act on one contiguous mode fiber.
pub trait ModeOperator: Sync {
    fn size(&self) -> usize;

    /// Stored nonzeros, ω(A).
    fn nnz(&self) -> usize;

    /// `y = A x` for `x`, `y` of length `size()`.
    fn apply_fiber(&self, x: &[f64], y: &mut [f64]);

    fn is_identity(&self) -> bool {
        false
    }
}

impl ModeOperator for DMatrix<f64> {
    fn size(&self) -> usize {
        self.nrows()
    }

    fn nnz(&self) -> usize {
        self.len()
    }

    fn apply_fiber(&self, x: &[f64], y: &mut [f64]) {
        let n = self.nrows();
        y.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let col = &self.as_slice()[j * n..(j + 1) * n];
            for (yi, &a) in y.iter_mut().zip(col) {
                *yi += a * xj;
            }
        }
    }
}

/// `I_n` without storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity(pub usize);

impl ModeOperator for Identity {
    fn size(&self) -> usize {
        self.0
    }

    fn nnz(&self) -> usize {
        self.0
    }

    fn apply_fiber(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }

    fn is_identity(&self) -> bool {
        true
    }
}

/// `(A_D ⊗ ⋯ ⊗ A_1) x` by successive mode products; `ops[0]` acts on mode 1.
pub fn kron_mvm(ops: &[&dyn ModeOperator], x: &[f64]) -> Result<Vec<f64>> {
    let shape: Vec<usize> = ops.iter().map(|op| op.size()).collect();
    let n: usize = shape.iter().product();
    if ops.is_empty() || n != x.len() {
        return Err(Error::dims(format!(
            "kron_mvm: operator sizes {shape:?} imply length {n}, got {}",
            x.len()
        )));
    }
    let mut cur = x.to_vec();
    let mut next = vec![0.0; n];
    for (d, op) in ops.iter().enumerate() {
        if op.is_identity() {
            continue;
        }
        mode_product(*op, &shape, d, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// `out = T ×_d A` for the tensor stored in `input`.
pub(crate) fn mode_product(op: &dyn ModeOperator, shape: &[usize], d: usize, input: &[f64], out: &mut [f64]) {
    let extent = shape[d];
    let (left, _) = mode_strides(shape, d);
    let block = left * extent;
    let sweep = |(o, inp): (&mut [f64], &[f64])| {
        if left == 1 {
            op.apply_fiber(inp, o);
            return;
        }
        let mut xin = vec![0.0; extent];
        let mut yout = vec![0.0; extent];
        for a in 0..left {
            for i in 0..extent {
                xin[i] = inp[a + left * i];
            }
            op.apply_fiber(&xin, &mut yout);
            for i in 0..extent {
                o[a + left * i] = yout[i];
            }
        }
    };
    if input.len() >= PAR_THRESHOLD {
        // Blocks are disjoint, so the result does not depend on scheduling.
        let min_len = (PAR_THRESHOLD / block).max(1);
        out.par_chunks_mut(block)
            .zip(input.par_chunks(block))
            .with_min_len(min_len)
            .for_each(sweep);
    } else {
        out.chunks_mut(block).zip(input.chunks(block)).for_each(sweep);
    }
}

/// Dense `A ⊗ B`; test and oracle use only.
pub fn kronecker_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
