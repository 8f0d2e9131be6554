//! Small sparse containers and dense helpers used by the covariance operators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::tensor::ModeOperator;

/// Symmetric matrix stored as a band of half-width `bandwidth`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSymmetric {
    n: usize,
    bandwidth: usize,
    // row-major, row i holds columns i-bandwidth ..= i+bandwidth (clipped entries are 0)
    band: Vec<f64>,
}

impl BandedSymmetric {
    /// Builds the band from `entry(i, j)` for `|i − j| ≤ bandwidth`; `entry`
    /// is only queried with `i ≤ j` and mirrored.
    pub fn from_fn(n: usize, bandwidth: usize, mut entry: impl FnMut(usize, usize) -> f64) -> Self {
        let bandwidth = bandwidth.min(n.saturating_sub(1));
        let w = 2 * bandwidth + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for j in i..(i + bandwidth + 1).min(n) {
                let v = entry(i, j);
                band[i * w + bandwidth + (j - i)] = v;
                band[j * w + bandwidth - (j - i)] = v;
            }
        }
        Self { n, bandwidth, band }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let off = i.abs_diff(j);
        if off > self.bandwidth {
            return 0.0;
        }
        let w = 2 * self.bandwidth + 1;
        self.band[i * w + (self.bandwidth + j) - i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }
}

impl ModeOperator for BandedSymmetric {
    fn size(&self) -> usize {
        self.n
    }

    fn nnz(&self) -> usize {
        let b = self.bandwidth;
        // full band minus the clipped corners
        self.n * (2 * b + 1) - b * (b + 1)
    }

    fn apply_fiber(&self, x: &[f64], y: &mut [f64]) {
        let b = self.bandwidth;
        let w = 2 * b + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(b);
            let hi = (i + b + 1).min(self.n);
            let row = &self.band[i * w..(i + 1) * w];
            let mut acc = 0.0;
            for j in lo..hi {
                acc += row[b + j - i] * x[j];
            }
            y[i] = acc;
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from a dense one, keeping exact nonzeros.
    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..n {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    /// Square matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut indptr = vec![0usize; n + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(j);
            values.push(v);
            indptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                a[(i, j)] = v;
            }
        }
        a
    }
}

impl ModeOperator for CsrMatrix {
    fn size(&self) -> usize {
        self.n
    }

    fn nnz(&self) -> usize {
        self.values.len()
    }

    fn apply_fiber(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }
}

/// Cholesky factorization, retrying with growing diagonal jitter (relative to
/// the mean diagonal) up to `max_jitter`. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, max_jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    let n = a.nrows().max(1);
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12;
    while jitter <= max_jitter {
        let shifted = a + DMatrix::identity(a.nrows(), a.ncols()) * (jitter * scale);
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter * scale));
        }
        jitter *= 10.0;
    }
    Err(Error::Singular(format!(
        "Cholesky failed with jitter up to {max_jitter:e}"
    )))
}

/// Inverse of a symmetric positive (semi-)definite matrix via Cholesky with jitter.
pub fn spd_inverse(a: &DMatrix<f64>, max_jitter: f64) -> Result<DMatrix<f64>> {
    let (c, _) = cholesky_with_jitter(a, max_jitter)?;
    let inv = c.inverse();
    Ok(symmetrize(inv))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let t = a.transpose();
    (a + t) * 0.5
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(Error::dims(format!(
            "dense_solve: matrix {:?} with rhs of length {}",
            a.shape(),
            b.len()
        )));
    }
    let lu = a.clone().lu();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot <= scale * 1e-14 * a.nrows() as f64 {
        return Err(Error::Singular(format!(
            "dense_solve: pivot {min_pivot:e} relative to scale {scale:e}"
        )));
    }
    lu.solve(&DVector::from_column_slice(b))
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| Error::Singular("dense_solve: LU solve failed".into()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
