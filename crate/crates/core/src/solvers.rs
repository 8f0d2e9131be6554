//! Conjugate gradient over matrix-free operators, and the two system
//! operators of the alternating updates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::CovarianceOperator;
use crate::linalg::{dot, norm2};
use crate::mask::{linear_from_unfold, ModeIndex, ObservationMask};
use crate::tensor::{kron_mvm, mode_product, mode_strides, Identity, ModeOperator};

pub use crate::linalg::dense_solve;

/// Work size above which the per-row data term runs on the rayon pool.
const PAR_WORK: usize = 1 << 16;

/// Diagonal guard added to a singular factor precision when some row has no observations.
pub const SINGULAR_GUARD: f64 = 1e-10;

/// A square linear map applied without materializing its matrix.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_fiber(x, y);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Stop on `‖e‖ < tol·(1 + ‖b‖)` instead of the absolute `‖e‖ < tol`.
    pub relative: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            relative: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

pub fn cg_solve(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    cg_solve_with(
        op,
        b,
        x0,
        &CgOptions {
            tol,
            max_iter,
            relative: false,
        },
    )
}

/// Plain CG with Fletcher–Reeves β, warm-started from `x0`.
///
/// The residual is updated recursively (`e_j = e_{j−1} − α A p_j`), as in the
/// textbook recurrence; the reported norm is that recursive residual.
pub fn cg_solve_with(op: &dyn LinearOperator, b: &[f64], x0: &[f64], opts: &CgOptions) -> Result<(Vec<f64>, CgReport)> {
    let n = op.dim();
    if b.len() != n || x0.len() != n {
        return Err(Error::dims(format!(
            "cg: operator dim {n}, rhs {}, x0 {}",
            b.len(),
            x0.len()
        )));
    }
    let threshold = if opts.relative {
        opts.tol * (1.0 + norm2(b))
    } else {
        opts.tol
    };

    let mut x = x0.to_vec();
    let mut ap = vec![0.0; n];
    op.apply(&x, &mut ap);
    let mut e: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let mut ee = dot(&e, &e);
    if !ee.is_finite() {
        return Err(Error::Numerical("cg: initial residual is not finite".into()));
    }
    let mut report = CgReport {
        iterations: 0,
        final_residual_norm: ee.sqrt(),
        converged: false,
    };
    if opts.max_iter == 0 {
        return Ok((x, report));
    }
    if ee.sqrt() < threshold {
        report.converged = true;
        return Ok((x, report));
    }

    let mut p = e.clone();
    for j in 1..=opts.max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Numerical(format!(
                "cg: pᵀAp = {pap:e} at iteration {j}; operator is not SPD"
            )));
        }
        let alpha = ee / pap;
        for ((xi, ei), (pi, api)) in x.iter_mut().zip(e.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ei -= alpha * api;
        }
        let ee_next = dot(&e, &e);
        if !ee_next.is_finite() {
            return Err(Error::Numerical(format!("cg: residual is not finite at iteration {j}")));
        }
        report.iterations = j;
        report.final_residual_norm = ee_next.sqrt();
        if ee_next.sqrt() < threshold {
            report.converged = true;
            break;
        }
        let beta = ee_next / ee;
        for (pi, ei) in p.iter_mut().zip(&e) {
            *pi = ei + beta * *pi;
        }
        ee = ee_next;
    }
    Ok((x, report))
}

/// `A = A₁ + A₂` of the mode-`d` factor update acting on `vec(U_dᵀ)`.
///
/// `A₁ = H_dᵀ O_d'ᵀ O_d' H_d` is block diagonal with one `R×R` block per row
/// of `U_d`; `A₂ = ρ (K_d^u)⁻¹ ⊗ I_R`. Neither is formed.
pub struct FactorSystem<'a> {
    /// `H_d^u` stored row-major: row `j` at `j*R .. (j+1)*R`.
    h_rows: Vec<f64>,
    rank: usize,
    rows: &'a ModeIndex,
    precision: &'a dyn ModeOperator,
    rho: f64,
    guard: f64,
}

impl<'a> FactorSystem<'a> {
    /// `h_du` is the `N/I_d × R` Khatri–Rao design; `rows` the observed
    /// unfolding columns of mode `d`; `precision` is `(K_d^u)⁻¹`.
    pub fn new(h_du: &DMatrix<f64>, rows: &'a ModeIndex, precision: &'a CovarianceOperator, rho: f64) -> Result<Self> {
        let extent = rows.rows();
        if precision.size() != extent {
            return Err(Error::dims(format!(
                "factor precision is {0}x{0}, mode has {extent} rows",
                precision.size()
            )));
        }
        if let Some(max_col) = (0..extent).filter_map(|i| rows.row(i).last()).max() {
            if *max_col >= h_du.nrows() {
                return Err(Error::dims(format!(
                    "observed column {max_col} exceeds Khatri-Rao rows {}",
                    h_du.nrows()
                )));
            }
        }
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::invalid(format!("rho must be nonnegative, got {rho}")));
        }
        let rank = h_du.ncols();
        let h_rows = h_du.transpose().as_slice().to_vec();
        let starved = (0..extent).any(|i| rows.row(i).is_empty());
        let guard = if precision.is_singular() && starved {
            SINGULAR_GUARD
        } else {
            0.0
        };
        Ok(Self {
            h_rows,
            rank,
            rows,
            precision: precision.precision_op()?,
            rho,
            guard,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Row `j` of `H_d^u`.
    pub fn h_row(&self, j: usize) -> &[f64] {
        &self.h_rows[j * self.rank..(j + 1) * self.rank]
    }

    /// `b = H_dᵀ vec([𝒢 ⊙ 𝒪]_(d)ᵀ)` with `values` the full tensor 𝒢 in `vec` order.
    pub fn rhs(&self, values: &[f64], shape: &[usize], d: usize) -> Vec<f64> {
        let r = self.rank;
        let extent = shape[d];
        let (left, _) = mode_strides(shape, d);
        let mut b = vec![0.0; extent * r];
        for i in 0..extent {
            let block = &mut b[i * r..(i + 1) * r];
            for &j in self.rows.row(i) {
                let g = values[linear_from_unfold(i, j, left, extent)];
                for (bk, hk) in block.iter_mut().zip(self.h_row(j)) {
                    *bk += g * hk;
                }
            }
        }
        b
    }

    /// `A₁ v` alone.
    pub fn apply_data_term(&self, v: &[f64], y: &mut [f64]) {
        let r = self.rank;
        let block = |(i, yi): (usize, &mut [f64])| {
            let vi = &v[i * r..(i + 1) * r];
            yi.fill(0.0);
            for &j in self.rows.row(i) {
                let h = self.h_row(j);
                let s = dot(h, vi);
                for (yk, hk) in yi.iter_mut().zip(h) {
                    *yk += s * hk;
                }
            }
        };
        if self.rows.len() * r >= PAR_WORK {
            y.par_chunks_mut(r).enumerate().for_each(block);
        } else {
            y.chunks_mut(r).enumerate().for_each(block);
        }
    }
}

impl LinearOperator for FactorSystem<'_> {
    fn dim(&self) -> usize {
        self.rank * self.rows.rows()
    }

    fn apply(&self, v: &[f64], y: &mut [f64]) {
        self.apply_data_term(v, y);
        if self.rho == 0.0 && self.guard == 0.0 {
            return;
        }
        // vec(Uᵀ) is an R×I_d column-major matrix; (K⁻¹ ⊗ I_R) acts on its second mode.
        let shape = [self.rank, self.rows.rows()];
        let mut reg = vec![0.0; v.len()];
        mode_product(self.precision, &shape, 1, v, &mut reg);
        for ((yi, ri), vi) in y.iter_mut().zip(&reg).zip(v) {
            *yi += self.rho * ri + self.guard * vi;
        }
    }
}

/// `γI + O₁ K_r O₁ᵀ` on the |Ω|-dimensional dual variable.
pub struct LocalSystem<'a> {
    mask: &'a ObservationMask,
    covariances: Vec<&'a dyn ModeOperator>,
    gamma: f64,
}

impl<'a> LocalSystem<'a> {
    pub fn new(mask: &'a ObservationMask, covariances: &'a [CovarianceOperator], gamma: f64) -> Result<Self> {
        if mask.observed_count() == 0 {
            return Err(Error::invalid("local system needs at least one observation"));
        }
        if covariances.len() != mask.shape().len() || covariances.iter().zip(mask.shape()).any(|(c, &e)| c.size() != e)
        {
            return Err(Error::dims(format!(
                "local covariance sizes {:?} do not match shape {:?}",
                covariances.iter().map(|c| c.size()).collect::<Vec<_>>(),
                mask.shape()
            )));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
        }
        let covariances = covariances
            .iter()
            .map(|c| c.covariance_op())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mask,
            covariances,
            gamma,
        })
    }

    /// `K_r x` for a full length-N vector.
    pub fn apply_kron(&self, x: &[f64]) -> Vec<f64> {
        kron_mvm(&self.covariances, x).expect("sizes checked at construction")
    }

    /// `r = K_r O₁ᵀ z`.
    pub fn primal_from_dual(&self, z: &[f64]) -> Vec<f64> {
        self.apply_kron(&self.mask.zero_pad(z))
    }
}

impl LinearOperator for LocalSystem<'_> {
    fn dim(&self) -> usize {
        self.mask.observed_count()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let full = self.apply_kron(&self.mask.zero_pad(x));
        for ((yi, &xi), &n) in y.iter_mut().zip(x).zip(self.mask.observed_indices()) {
            *yi = self.gamma * xi + full[n];
        }
    }
}

/// Identity map of a given size, mostly for tests and defaults.
impl LinearOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}
