//! The GLSKF estimator: ALS over kernelized CP factors and a kernel-correlated
//! local residual, plus the LSTF / LSKF / GLSlocal ablations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{empirical_cov, CovarianceOperator, KernelFamily, KernelSpec};
use crate::linalg::dot;
use crate::mask::{linear_from_unfold, ObservationMask};
use crate::solvers::{cg_solve_with, CgOptions, CgReport, FactorSystem, LocalSystem};
use crate::tensor::{cp_reconstruct, kron_mvm, mode_strides, unfold, DenseTensor, FactorSet, Identity, ModeOperator};

/// Which components are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Glskf,
    /// Factors with identity covariances, no local component.
    Lstf,
    /// Kernelized factors, no local component.
    Lskf,
    /// Local component only.
    Glslocal,
}

impl Mode {
    pub fn uses_factors(self) -> bool {
        self != Mode::Glslocal
    }

    pub fn uses_local(self) -> bool {
        matches!(self, Mode::Glskf | Mode::Glslocal)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Glskf => "glskf",
            Mode::Lstf => "lstf",
            Mode::Lskf => "lskf",
            Mode::Glslocal => "glslocal",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "glskf" => Ok(Mode::Glskf),
            "lstf" => Ok(Mode::Lstf),
            "lskf" => Ok(Mode::Lskf),
            "glslocal" => Ok(Mode::Glslocal),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected glskf, lstf, lskf or glslocal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlskfConfig {
    pub rank: usize,
    pub rho: f64,
    pub gamma: f64,
    /// One spec per mode; empty means identity everywhere.
    pub factor_kernels: Vec<KernelSpec>,
    pub local_kernels: Vec<KernelSpec>,
    /// K₀: outer iterations that update only the factors.
    pub warmup: usize,
    /// K: maximum outer iterations.
    pub max_outer: usize,
    /// Stop once `‖ΔŶ_Ω‖² < stop_eps · ‖Y_Ω‖²`.
    pub stop_eps: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub cg_relative: bool,
    pub init_scale: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Mode whose local covariance is re-estimated from ℛ. Defaults to the
    /// last mode when its local kernel is `empirical`.
    pub channel_mode: Option<usize>,
    /// Rescale the refreshed channel covariance to unit mean variance, so γ
    /// alone sets the size of ℛ. Without it the sample covariance of a small
    /// ℛ shrinks the next ℛ further and the local component fades out.
    pub normalize_channel_cov: bool,
}

impl Default for GlskfConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            rho: 1.0,
            gamma: 1.0,
            factor_kernels: Vec::new(),
            local_kernels: Vec::new(),
            warmup: 5,
            max_outer: 100,
            stop_eps: 1e-8,
            cg_tol: 1e-6,
            cg_max_iter: 1000,
            cg_relative: false,
            init_scale: 0.1,
            seed: 0,
            mode: Mode::Glskf,
            channel_mode: None,
            normalize_channel_cov: true,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl GlskfConfig {
    pub fn cg_options(&self) -> CgOptions {
        CgOptions {
            tol: self.cg_tol,
            max_iter: self.cg_max_iter,
            relative: self.cg_relative,
        }
    }

    pub fn factor_kernel(&self, d: usize) -> KernelSpec {
        self.factor_kernels.get(d).cloned().unwrap_or_else(KernelSpec::identity)
    }

    pub fn local_kernel(&self, d: usize) -> KernelSpec {
        self.local_kernels.get(d).cloned().unwrap_or_else(KernelSpec::identity)
    }

    /// The mode refreshed from ℛ, if any.
    pub fn resolved_channel_mode(&self, ndim: usize) -> Option<usize> {
        match self.channel_mode {
            Some(d) => Some(d),
            None if ndim > 0 && self.local_kernel(ndim - 1).is_empirical() => Some(ndim - 1),
            None => None,
        }
    }

    pub fn validate(&self, ndim: usize) -> Result<()> {
        if ndim == 0 {
            return Err(Error::Config("tensor has no modes".into()));
        }
        if self.mode.uses_factors() && self.rank == 0 {
            return Err(Error::Config(format!("rank must be >= 1 in {} mode", self.mode)));
        }
        positive("rho", self.rho)?;
        positive("gamma", self.gamma)?;
        positive("stop_eps", self.stop_eps)?;
        positive("cg_tol", self.cg_tol)?;
        positive("init_scale", self.init_scale)?;
        if self.warmup >= self.max_outer {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than max_outer ({})",
                self.warmup, self.max_outer
            )));
        }
        for (name, specs) in [("factor", &self.factor_kernels), ("local", &self.local_kernels)] {
            if !specs.is_empty() && specs.len() != ndim {
                return Err(Error::Config(format!(
                    "{} {name} kernels given for a {ndim}-mode tensor",
                    specs.len()
                )));
            }
            for s in specs.iter() {
                s.validate()?;
            }
        }
        if self.factor_kernels.iter().any(KernelSpec::is_empirical) {
            return Err(Error::Config(
                "empirical kernels are only valid for the local component".into(),
            ));
        }
        if self
            .local_kernels
            .iter()
            .any(|s| s.family == KernelFamily::QvDifference)
        {
            return Err(Error::Config(
                "qv has no covariance and cannot be a local kernel".into(),
            ));
        }
        let channel = self.resolved_channel_mode(ndim);
        if let Some(c) = channel {
            if c >= ndim {
                return Err(Error::ModeOutOfRange { mode: c, ndim });
            }
            if !self.local_kernel(c).is_empirical() {
                return Err(Error::Config(format!(
                    "channel mode {c} needs an `empirical` local kernel, found `{}`",
                    self.local_kernel(c)
                )));
            }
        }
        if let Some(d) = (0..ndim).find(|&d| self.local_kernel(d).is_empirical() && Some(d) != channel) {
            return Err(Error::Config(format!(
                "local kernel of mode {d} is `empirical` but the channel mode is {channel:?}"
            )));
        }
        Ok(())
    }
}

/// Which block produced a trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Factor(usize),
    Local,
    /// The channel covariance changed; the objective itself changed with it.
    Refresh,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Init => f.write_str("init"),
            Stage::Factor(d) => write!(f, "factor{}", d + 1),
            Stage::Local => f.write_str("local"),
            Stage::Refresh => f.write_str("refresh"),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub stage: Stage,
    pub objective: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub trace: Vec<TraceEntry>,
    /// `‖ΔŶ_Ω‖²` after each outer iteration (NaN for the first).
    pub changes: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |e| e.objective)
    }

    /// Largest increase between consecutive block updates, relative to
    /// `1 + |objective|`; comparisons across a covariance refresh are skipped.
    pub fn worst_ascent(&self) -> f64 {
        self.trace
            .windows(2)
            .filter(|w| w[1].stage != Stage::Refresh)
            .map(|w| (w[1].objective - w[0].objective) / (1.0 + w[0].objective.abs()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// 𝒴̂: observations on Ω, ℳ + ℛ elsewhere.
    pub completed: DenseTensor,
    pub global: DenseTensor,
    pub local: DenseTensor,
    pub factors: Option<FactorSet>,
    pub local_covariances: Vec<CovarianceOperator>,
    pub report: FitReport,
}

/// Per-iteration view handed to a [`FitObserver`].
pub struct IterationSnapshot<'a> {
    pub iteration: usize,
    pub local_active: bool,
    pub objective: f64,
    pub change: Option<f64>,
    pub global: &'a [f64],
    pub local: &'a [f64],
}

pub trait FitObserver {
    fn on_iteration(&mut self, snapshot: &IterationSnapshot<'_>);
}

impl<F: FnMut(&IterationSnapshot<'_>)> FitObserver for F {
    fn on_iteration(&mut self, snapshot: &IterationSnapshot<'_>) {
        self(snapshot)
    }
}

struct NoObserver;

impl FitObserver for NoObserver {
    fn on_iteration(&mut self, _: &IterationSnapshot<'_>) {}
}

/// Observations on Ω, `estimate` elsewhere.
pub fn assemble(y: &DenseTensor, mask: &ObservationMask, estimate: &[f64]) -> Result<DenseTensor> {
    mask.check_shape(y)?;
    if estimate.len() != y.len() {
        return Err(Error::dims("estimate length does not match tensor"));
    }
    let data = estimate
        .iter()
        .zip(y.data())
        .zip(mask.as_bools())
        .map(|((&e, &v), &o)| if o { v } else { e })
        .collect();
    DenseTensor::new(y.shape().to_vec(), data)
}

/// The penalized least-squares objective, with every K-norm evaluated through
/// precision operators. Missing components count as zero.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    y: &DenseTensor,
    mask: &ObservationMask,
    factors: Option<&FactorSet>,
    local: Option<&DenseTensor>,
    rho: f64,
    gamma: f64,
    factor_covs: &[CovarianceOperator],
    local_covs: &[CovarianceOperator],
) -> Result<f64> {
    mask.check_shape(y)?;
    let global = factors.map(cp_reconstruct).transpose()?;
    if let Some(g) = &global {
        y.same_shape(g)?;
    }
    if let Some(r) = local {
        y.same_shape(r)?;
    }
    let at = |t: &Option<&DenseTensor>, n: usize| t.map_or(0.0, |t| t.data()[n]);
    let data: f64 = mask
        .observed_indices()
        .iter()
        .map(|&n| {
            let e = y.data()[n] - at(&global.as_ref(), n) - at(&local, n);
            0.5 * e * e
        })
        .sum();
    let mut total = data;
    if let Some(f) = factors {
        if factor_covs.len() != f.ndim() {
            return Err(Error::dims("one factor covariance per mode is required"));
        }
        for (u, cov) in f.factors().iter().zip(factor_covs) {
            total += rho * 0.5 * factor_quadratic(u, cov.precision_op()?)?;
        }
    }
    if let Some(r) = local {
        total += gamma * 0.5 * kron_quadratic(r.data(), local_covs)?;
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite ({total})")));
    }
    Ok(total)
}

/// `tr(Uᵀ P U)`.
fn factor_quadratic(u: &DMatrix<f64>, precision: &dyn ModeOperator) -> Result<f64> {
    let rank = u.ncols();
    let x = u.transpose().as_slice().to_vec();
    let id = Identity(rank);
    let px = kron_mvm(&[&id, precision], &x)?;
    Ok(dot(&x, &px))
}

/// `rᵀ (⊗ K_d)⁻¹ r`.
fn kron_quadratic(r: &[f64], covs: &[CovarianceOperator]) -> Result<f64> {
    let ops = covs.iter().map(|c| c.precision_op()).collect::<Result<Vec<_>>>()?;
    let pr = kron_mvm(&ops, r)?;
    Ok(dot(r, &pr))
}

/// Mutable state of one fit; each `update_*` solves its block exactly (to CG tolerance).
pub struct FitState<'a> {
    y: &'a DenseTensor,
    mask: &'a ObservationMask,
    factors: Option<FactorSet>,
    factor_covs: Vec<CovarianceOperator>,
    local_covs: Vec<CovarianceOperator>,
    rho: f64,
    gamma: f64,
    cg: CgOptions,
    /// Position of each linear offset in the observed list (`usize::MAX` if missing).
    obs_pos: Vec<usize>,
    y_obs: Vec<f64>,
    global_obs: Vec<f64>,
    global: Vec<f64>,
    local: Vec<f64>,
    dual: Vec<f64>,
    factor_penalty: Vec<f64>,
    local_penalty: f64,
}

impl<'a> FitState<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        y: &'a DenseTensor,
        mask: &'a ObservationMask,
        factors: Option<FactorSet>,
        factor_covs: Vec<CovarianceOperator>,
        local_covs: Vec<CovarianceOperator>,
        rho: f64,
        gamma: f64,
        cg: CgOptions,
    ) -> Result<Self> {
        mask.check_shape(y)?;
        if mask.observed_count() == 0 {
            return Err(Error::invalid("no observed entries"));
        }
        let y_obs = mask.slice(y.data());
        if y_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observed entries must be finite"));
        }
        let shape = y.shape();
        if let Some(f) = &factors {
            if f.shape() != shape {
                return Err(Error::dims(format!("factor shape {:?} vs tensor {shape:?}", f.shape())));
            }
            if factor_covs.len() != shape.len() || factor_covs.iter().zip(shape).any(|(c, &n)| c.size() != n) {
                return Err(Error::dims("factor covariances do not match the tensor shape"));
            }
        }
        if local_covs.len() != shape.len() || local_covs.iter().zip(shape).any(|(c, &n)| c.size() != n) {
            return Err(Error::dims("local covariances do not match the tensor shape"));
        }
        let mut obs_pos = vec![usize::MAX; y.len()];
        for (k, &n) in mask.observed_indices().iter().enumerate() {
            obs_pos[n] = k;
        }
        let n_obs = mask.observed_count();
        let mut state = Self {
            y,
            mask,
            factors,
            factor_covs,
            local_covs,
            rho,
            gamma,
            cg,
            obs_pos,
            y_obs,
            global_obs: vec![0.0; n_obs],
            global: vec![0.0; y.len()],
            local: vec![0.0; y.len()],
            dual: vec![0.0; n_obs],
            factor_penalty: vec![0.0; shape.len()],
            local_penalty: 0.0,
        };
        if let Some(f) = &state.factors {
            for d in 0..shape.len() {
                state.factor_penalty[d] =
                    0.5 * rho * factor_quadratic(f.factor(d), state.factor_covs[d].precision_op()?)?;
            }
        }
        state.rebuild_global()?;
        state.global_obs = mask.slice(&state.global);
        Ok(state)
    }

    pub fn factors(&self) -> Option<&FactorSet> {
        self.factors.as_ref()
    }

    /// ℳ as of the last [`FitState::rebuild_global`].
    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn local(&self) -> &[f64] {
        &self.local
    }

    pub fn dual(&self) -> &[f64] {
        &self.dual
    }

    pub fn local_covariances(&self) -> &[CovarianceOperator] {
        &self.local_covs
    }

    /// ℳ_Ω + ℛ_Ω in observed order.
    pub fn reconstruction_observed(&self) -> Vec<f64> {
        let local = self.mask.slice(&self.local);
        self.global_obs.iter().zip(&local).map(|(g, r)| g + r).collect()
    }

    pub fn rebuild_global(&mut self) -> Result<()> {
        if let Some(f) = &self.factors {
            self.global = cp_reconstruct(f)?.into_data();
        }
        Ok(())
    }

    /// Objective from cached block terms; matches [`objective`] up to rounding.
    pub fn objective(&self) -> Result<f64> {
        let local = self.mask.slice(&self.local);
        let data: f64 = self
            .y_obs
            .iter()
            .zip(&self.global_obs)
            .zip(&local)
            .map(|((y, g), r)| {
                let e = y - g - r;
                0.5 * e * e
            })
            .sum();
        let total = data + self.factor_penalty.iter().sum::<f64>() + self.local_penalty;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("objective is not finite ({total})")));
        }
        Ok(total)
    }

    /// Minimize over `U_d` with everything else fixed.
    pub fn update_factor(&mut self, d: usize) -> Result<CgReport> {
        let shape = self.y.shape().to_vec();
        if d >= shape.len() {
            return Err(Error::ModeOutOfRange {
                mode: d,
                ndim: shape.len(),
            });
        }
        let factors = self
            .factors
            .as_mut()
            .ok_or_else(|| Error::invalid("this fit has no global component"))?;
        let h = factors.khatri_rao_except(d)?;
        let rows = self.mask.mode_index(d);
        let sys = FactorSystem::new(&h, rows, &self.factor_covs[d], self.rho)?;

        // 𝒢 = 𝒴 − ℛ on Ω, zero elsewhere.
        let mut g = vec![0.0; self.y.len()];
        for (k, &n) in self.mask.observed_indices().iter().enumerate() {
            g[n] = self.y_obs[k] - self.local[n];
        }
        let b = sys.rhs(&g, &shape, d);
        let x0 = factors.factor(d).transpose().as_slice().to_vec();
        let (x, report) = cg_solve_with(&sys, &b, &x0, &self.cg)?;

        let r = factors.rank();
        let extent = shape[d];
        let (left, _) = mode_strides(&shape, d);
        for i in 0..extent {
            let ui = &x[i * r..(i + 1) * r];
            for &j in rows.row(i) {
                let pos = self.obs_pos[linear_from_unfold(i, j, left, extent)];
                self.global_obs[pos] = dot(ui, sys.h_row(j));
            }
        }
        let u = DMatrix::from_row_slice(extent, r, &x);
        self.factor_penalty[d] = 0.5 * self.rho * factor_quadratic(&u, self.factor_covs[d].precision_op()?)?;
        factors.set_factor(d, u)?;
        Ok(report)
    }

    /// Minimize over ℛ with ℳ fixed, through the |Ω|-sized dual system.
    pub fn update_local(&mut self) -> Result<CgReport> {
        let sys = LocalSystem::new(self.mask, &self.local_covs, self.gamma)?;
        let l_obs: Vec<f64> = self.y_obs.iter().zip(&self.global_obs).map(|(y, g)| y - g).collect();
        let (z, report) = cg_solve_with(&sys, &l_obs, &self.dual, &self.cg)?;
        let r = sys.primal_from_dual(&z);
        // With r = K O₁ᵀ z, rᵀK⁻¹r = zᵀ r_Ω.
        self.local_penalty = 0.5 * self.gamma * dot(&z, &self.mask.slice(&r));
        self.local = r;
        self.dual = z;
        Ok(report)
    }

    /// Re-estimate the local covariance of mode `d` from the rows of `ℛ_(d)`;
    /// with `normalize` the sample covariance is divided by its mean diagonal
    /// before `jitter·I` is added. Returns false (and sets `jitter·I`) when ℛ is
    /// identically zero.
    pub fn refresh_channel_cov(&mut self, d: usize, jitter: f64, normalize: bool) -> Result<bool> {
        let shape = self.y.shape();
        if d >= shape.len() {
            return Err(Error::ModeOutOfRange {
                mode: d,
                ndim: shape.len(),
            });
        }
        let degenerate = self.local.iter().all(|&v| v == 0.0);
        if degenerate {
            log::warn!(
                "local component is zero; channel covariance of mode {} set to jitter*I",
                d + 1
            );
        }
        let mut rows = unfold(&DenseTensor::new(shape.to_vec(), self.local.clone())?, d)?;
        if normalize && !degenerate {
            let sample = empirical_cov(&rows, 0.0)?.to_dense_covariance()?;
            let mean_var = sample.trace() / sample.nrows() as f64;
            if mean_var > 0.0 {
                rows /= mean_var.sqrt();
            }
        }
        self.local_covs[d] = empirical_cov(&rows, jitter)?;
        self.local_penalty = 0.5 * self.gamma * kron_quadratic(&self.local, &self.local_covs)?;
        Ok(!degenerate)
    }
}

/// A configured estimator with its per-mode covariance operators built.
#[derive(Debug, Clone)]
pub struct Glskf {
    config: GlskfConfig,
    factor_covs: Vec<CovarianceOperator>,
    local_covs: Vec<CovarianceOperator>,
}

impl Glskf {
    /// Builds covariances for `shape` from the config's kernel specs.
    pub fn new(config: GlskfConfig, shape: &[usize]) -> Result<Self> {
        config.validate(shape.len())?;
        let factor_covs = if config.mode == Mode::Lstf || !config.mode.uses_factors() {
            shape.iter().map(|&n| CovarianceOperator::identity(n)).collect()
        } else {
            shape
                .iter()
                .enumerate()
                .map(|(d, &n)| crate::io::build_mode_covariance(n, &config.factor_kernel(d)))
                .collect::<Result<_>>()?
        };
        let local_covs = shape
            .iter()
            .enumerate()
            .map(|(d, &n)| crate::io::build_mode_covariance(n, &config.local_kernel(d)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            factor_covs,
            local_covs,
        })
    }

    /// Uses caller-built covariance operators instead of kernel specs.
    pub fn with_covariances(
        config: GlskfConfig,
        factor_covs: Vec<CovarianceOperator>,
        local_covs: Vec<CovarianceOperator>,
    ) -> Result<Self> {
        let ndim = local_covs.len();
        config.validate(ndim)?;
        if factor_covs.len() != ndim {
            return Err(Error::dims("factor and local covariance counts differ"));
        }
        Ok(Self {
            config,
            factor_covs,
            local_covs,
        })
    }

    pub fn config(&self) -> &GlskfConfig {
        &self.config
    }

    pub fn factor_covariances(&self) -> &[CovarianceOperator] {
        &self.factor_covs
    }

    pub fn local_covariances(&self) -> &[CovarianceOperator] {
        &self.local_covs
    }

    /// Factors drawn from `U(0, init_scale)`, mode by mode, row by row.
    pub fn initial_factors(&self, shape: &[usize]) -> Result<FactorSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let dist = Uniform::new(0.0, self.config.init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let r = self.config.rank;
        let factors = shape
            .iter()
            .map(|&n| {
                let rows: Vec<f64> = (0..n * r).map(|_| dist.sample(&mut rng)).collect();
                DMatrix::from_row_slice(n, r, &rows)
            })
            .collect();
        FactorSet::new(factors)
    }

    pub fn fit(&self, y: &DenseTensor, mask: &ObservationMask) -> Result<FitOutput> {
        self.fit_with_observer(y, mask, &mut NoObserver)
    }

    pub fn fit_with_observer(
        &self,
        y: &DenseTensor,
        mask: &ObservationMask,
        observer: &mut dyn FitObserver,
    ) -> Result<FitOutput> {
        let cfg = &self.config;
        let shape = y.shape().to_vec();
        if shape.len() != self.local_covs.len() || shape.iter().zip(&self.local_covs).any(|(&n, c)| c.size() != n) {
            return Err(Error::dims(format!(
                "estimator was built for shape {:?}, data has shape {shape:?}",
                self.local_covs.iter().map(CovarianceOperator::size).collect::<Vec<_>>()
            )));
        }
        let start = Instant::now();
        let factors = cfg
            .mode
            .uses_factors()
            .then(|| self.initial_factors(&shape))
            .transpose()?;
        let mut state = FitState::new(
            y,
            mask,
            factors,
            self.factor_covs.clone(),
            self.local_covs.clone(),
            cfg.rho,
            cfg.gamma,
            cfg.cg_options(),
        )?;
        let channel = cfg.resolved_channel_mode(shape.len());
        let channel_jitter = channel.map(|d| cfg.local_kernel(d).jitter);
        let y_norm2 = dot(&state.y_obs, &state.y_obs);

        let mut trace = vec![TraceEntry {
            outer: 0,
            stage: Stage::Init,
            objective: state.objective()?,
            cg_iterations: 0,
            cg_converged: true,
            seconds: 0.0,
        }];
        let mut changes = Vec::new();
        let mut prev = state.reconstruction_observed();
        let mut converged = false;
        let mut iterations = 0;

        for k in 0..cfg.max_outer {
            let local_active = cfg.mode.uses_local() && (cfg.mode == Mode::Glslocal || k >= cfg.warmup);
            let mut record = |state: &FitState, stage, report: Option<CgReport>, t: Instant| -> Result<()> {
                trace.push(TraceEntry {
                    outer: k + 1,
                    stage,
                    objective: state.objective()?,
                    cg_iterations: report.map_or(0, |r| r.iterations),
                    cg_converged: report.is_none_or(|r| r.converged),
                    seconds: t.elapsed().as_secs_f64(),
                });
                Ok(())
            };
            if cfg.mode.uses_factors() {
                for d in 0..shape.len() {
                    let t = Instant::now();
                    let rep = state.update_factor(d)?;
                    record(&state, Stage::Factor(d), Some(rep), t)?;
                }
                state.rebuild_global()?;
            }
            if local_active {
                let t = Instant::now();
                let rep = state.update_local()?;
                record(&state, Stage::Local, Some(rep), t)?;
                if let (Some(d), Some(jitter)) = (channel, channel_jitter) {
                    let t = Instant::now();
                    state.refresh_channel_cov(d, jitter, cfg.normalize_channel_cov)?;
                    record(&state, Stage::Refresh, None, t)?;
                }
            }
            iterations = k + 1;

            let current = state.reconstruction_observed();
            let change: f64 = current.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum();
            changes.push(change);
            prev = current;
            let objective = trace.last().map_or(f64::NAN, |e| e.objective);
            log::debug!("iteration {iterations}: objective {objective:.6e}, change {change:.3e}");
            observer.on_iteration(&IterationSnapshot {
                iteration: k,
                local_active,
                objective,
                change: Some(change),
                global: &state.global,
                local: &state.local,
            });
            let gate = cfg.mode == Mode::Glslocal || k >= cfg.warmup;
            if gate && k > 0 && change < cfg.stop_eps * y_norm2 {
                converged = true;
                break;
            }
        }

        let estimate: Vec<f64> = state.global.iter().zip(&state.local).map(|(g, r)| g + r).collect();
        let completed = assemble(y, mask, &estimate)?;
        let report = FitReport {
            trace,
            changes,
            iterations,
            converged,
            seconds: start.elapsed().as_secs_f64(),
        };
        let FitState {
            factors,
            local_covs,
            global,
            local,
            ..
        } = state;
        Ok(FitOutput {
            completed,
            global: DenseTensor::new(shape.clone(), global)?,
            local: DenseTensor::new(shape, local)?,
            factors,
            local_covariances: local_covs,
            report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_covariance_grid;
    use crate::linalg::{dense_solve, spd_inverse};
    use crate::tensor::kronecker_dense;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn tight() -> CgOptions {
        CgOptions {
            tol: 1e-12,
            max_iter: 5000,
            relative: false,
        }
    }

    fn random_problem(shape: &[usize], rate: f64, seed: u64) -> (DenseTensor, ObservationMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let y = DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut bools: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < rate).collect();
        bools[0] = true;
        (y, ObservationMask::from_bools(shape, bools).unwrap())
    }

    fn random_factors(shape: &[usize], rank: usize, seed: u64) -> FactorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FactorSet::new(
            shape
                .iter()
                .map(|&n| DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn covs(shape: &[usize], spec: &KernelSpec) -> Vec<CovarianceOperator> {
        shape.iter().map(|&n| build_covariance_grid(n, spec).unwrap()).collect()
    }

    fn multi_index(shape: &[usize], mut n: usize) -> Vec<usize> {
        shape
            .iter()
            .map(|&e| {
                let i = n % e;
                n /= e;
                i
            })
            .collect()
    }

    /// Normal equations for `vec(U_dᵀ)` built entry by entry from the CP model.
    fn dense_factor_oracle(
        y: &DenseTensor,
        local: &[f64],
        mask: &ObservationMask,
        f: &FactorSet,
        d: usize,
        precision: &DMatrix<f64>,
        rho: f64,
    ) -> Vec<f64> {
        let shape = y.shape();
        let r = f.rank();
        let p = shape[d] * r;
        let obs = mask.observed_indices();
        let mut x = DMatrix::zeros(obs.len(), p);
        let mut g = nalgebra::DVector::zeros(obs.len());
        for (row, &n) in obs.iter().enumerate() {
            let idx = multi_index(shape, n);
            for c in 0..r {
                let prod: f64 = (0..shape.len())
                    .filter(|&k| k != d)
                    .map(|k| f.factor(k)[(idx[k], c)])
                    .product();
                x[(row, idx[d] * r + c)] = prod;
            }
            g[row] = y.data()[n] - local[n];
        }
        let a = x.transpose() * &x + kronecker_dense(precision, &DMatrix::identity(r, r)) * rho;
        let b = x.transpose() * g;
        dense_solve(&a, b.as_slice()).unwrap()
    }

    #[test]
    fn factor_update_matches_dense_normal_equations() {
        let shape = [4, 5, 3];
        let (y, mask) = random_problem(&shape, 0.5, 1);
        let fk = covs(&shape, &KernelSpec::matern32(2.0));
        let lk = covs(&shape, &KernelSpec::identity());
        let f = random_factors(&shape, 2, 2);
        let mut state = FitState::new(&y, &mask, Some(f), fk.clone(), lk, 0.5, 1.0, tight()).unwrap();
        for d in 0..3 {
            let before = state.factors().unwrap().clone();
            let want = dense_factor_oracle(
                &y,
                state.local(),
                &mask,
                &before,
                d,
                &fk[d].to_dense_precision().unwrap(),
                0.5,
            );
            state.update_factor(d).unwrap();
            let got = state.factors().unwrap().factor(d).transpose();
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-5 * scale, "mode {d}: {err} vs {scale}");
        }
    }

    #[test]
    fn factor_update_least_squares_limit() {
        // D = 2, R = 1, fully observed, tiny ρ: u₁ = G u₂ / (u₂ᵀu₂).
        let shape = [4, 3];
        let (y, mask) = random_problem(&shape, 2.0, 3);
        let f = random_factors(&shape, 1, 4);
        let u2 = f.factor(1).clone();
        let ident = covs(&shape, &KernelSpec::identity());
        let mut state = FitState::new(&y, &mask, Some(f), ident.clone(), ident, 1e-10, 1.0, tight()).unwrap();
        state.update_factor(0).unwrap();
        let g = DMatrix::from_column_slice(4, 3, y.data());
        let want = &g * &u2 / u2.norm_squared();
        assert!((state.factors().unwrap().factor(0) - want).amax() < 1e-6);
    }

    #[test]
    fn factor_update_large_rho_shrinks() {
        let shape = [4, 3, 2];
        let (y, mask) = random_problem(&shape, 0.7, 5);
        let ident = covs(&shape, &KernelSpec::identity());
        let mut state = FitState::new(
            &y,
            &mask,
            Some(random_factors(&shape, 2, 6)),
            ident.clone(),
            ident,
            1e8,
            1.0,
            tight(),
        )
        .unwrap();
        state.update_factor(1).unwrap();
        assert!(state.factors().unwrap().factor(1).norm() < 1e-3);
    }

    #[test]
    fn factor_update_with_empty_rows_and_qv() {
        // Row 0 of mode 0 is never observed; the singular QV precision gets a guard.
        let shape = [4, 3];
        let observed: Vec<usize> = (0..12).filter(|n| n % 4 != 0).collect();
        let mask = ObservationMask::from_linear(&shape, &observed).unwrap();
        let y = DenseTensor::from_fn(&shape, |i| (i[0] + 2 * i[1]) as f64).unwrap();
        let fk = vec![
            build_covariance_grid(4, &KernelSpec::qv()).unwrap(),
            CovarianceOperator::identity(3),
        ];
        let mut state = FitState::new(
            &y,
            &mask,
            Some(random_factors(&shape, 2, 7)),
            fk,
            covs(&shape, &KernelSpec::identity()),
            1.0,
            1.0,
            tight(),
        )
        .unwrap();
        let rep = state.update_factor(0).unwrap();
        assert!(rep.converged);
        assert!(state.factors().unwrap().factor(0).iter().all(|v| v.is_finite()));
    }

    /// `r = (O₁ᵀO₁ + γK⁻¹)⁻¹ O₁ᵀ l` with the Kronecker covariance formed densely.
    fn dense_primal_local(mask: &ObservationMask, covs: &[CovarianceOperator], gamma: f64, l: &[f64]) -> Vec<f64> {
        let mut k = covs[0].to_dense_covariance().unwrap();
        for c in &covs[1..] {
            k = kronecker_dense(&c.to_dense_covariance().unwrap(), &k);
        }
        let kinv = spd_inverse(&k, 0.0).unwrap();
        let n = k.nrows();
        let mut a = kinv * gamma;
        let mut b = vec![0.0; n];
        for &i in mask.observed_indices() {
            a[(i, i)] += 1.0;
            b[i] = l[i];
        }
        dense_solve(&a, &b).unwrap()
    }

    #[test]
    fn local_update_matches_dense_primal() {
        let shape = [3, 4, 2];
        let (y, mask) = random_problem(&shape, 0.4, 8);
        let lk = vec![
            build_covariance_grid(3, &KernelSpec::matern32(2.0).with_taper(2.5)).unwrap(),
            build_covariance_grid(4, &KernelSpec::matern32(2.0).with_taper(3.0)).unwrap(),
            build_covariance_grid(2, &KernelSpec::squared_exponential(1.0)).unwrap(),
        ];
        let mut state = FitState::new(&y, &mask, None, vec![], lk.clone(), 1.0, 0.3, tight()).unwrap();
        state.update_local().unwrap();
        let want = dense_primal_local(&mask, &lk, 0.3, y.data());
        let err = state
            .local()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-5 * scale);
    }

    #[test]
    fn local_update_identity_full_observation() {
        let shape = [3, 4];
        let (y, mask) = random_problem(&shape, 2.0, 9);
        let mut state = FitState::new(
            &y,
            &mask,
            None,
            vec![],
            covs(&shape, &KernelSpec::identity()),
            1.0,
            0.25,
            tight(),
        )
        .unwrap();
        state.update_local().unwrap();
        for (r, l) in state.local().iter().zip(y.data()) {
            assert_relative_eq!(*r, l / 1.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn local_update_ridge_limit() {
        let shape = [4, 3];
        let (y, mask) = random_problem(&shape, 0.6, 10);
        let lk = covs(&shape, &KernelSpec::matern32(1.0).with_taper(2.0));
        let mut state = FitState::new(&y, &mask, None, vec![], lk, 1.0, 1e9, tight()).unwrap();
        state.update_local().unwrap();
        let r = state.local().iter().map(|v| v * v).sum::<f64>().sqrt();
        let l = mask.slice(y.data()).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r < 1e-6 * l);
    }

    #[test]
    fn warm_started_local_resolve() {
        let shape = [6, 5, 2];
        let (y, mask) = random_problem(&shape, 0.5, 11);
        let lk = covs(&shape, &KernelSpec::matern32(2.0).with_taper(3.0));
        let mut state = FitState::new(&y, &mask, None, vec![], lk, 1.0, 0.5, CgOptions::default()).unwrap();
        state.update_local().unwrap();
        assert!(state.update_local().unwrap().iterations <= 2);
    }

    #[test]
    fn refresh_cases() {
        let shape = [4, 3, 2];
        let (y, mask) = random_problem(&shape, 0.8, 12);
        let mut state = FitState::new(
            &y,
            &mask,
            None,
            vec![],
            covs(&shape, &KernelSpec::identity()),
            1.0,
            1.0,
            tight(),
        )
        .unwrap();
        assert!(!state.refresh_channel_cov(2, 1e-6, false).unwrap());
        assert_eq!(
            state.local_covariances()[2].to_dense_covariance().unwrap(),
            DMatrix::identity(2, 2) * 1e-6
        );

        state.update_local().unwrap();
        assert!(state.refresh_channel_cov(2, 1e-6, false).unwrap());
        // Hand sample covariance of the two channels over the 12 positions.
        let r = state.local();
        let (a, b) = (&r[..12], &r[12..]);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / 12.0;
        let cov = |u: &[f64], v: &[f64]| {
            let (mu, mv) = (mean(u), mean(v));
            u.iter().zip(v).map(|(x, y)| (x - mu) * (y - mv)).sum::<f64>() / 11.0
        };
        let k = state.local_covariances()[2].to_dense_covariance().unwrap();
        assert_relative_eq!(k[(0, 0)], cov(a, a) + 1e-6, epsilon = 1e-12);
        assert_relative_eq!(k[(0, 1)], cov(a, b), epsilon = 1e-12);
        assert_relative_eq!(k[(1, 1)], cov(b, b) + 1e-6, epsilon = 1e-12);
    }

    #[test]
    fn normalized_refresh_has_unit_mean_variance() {
        let shape = [4, 3, 3];
        let (y, mask) = random_problem(&shape, 0.8, 14);
        let mut state = FitState::new(
            &y,
            &mask,
            None,
            vec![],
            covs(&shape, &KernelSpec::identity()),
            1.0,
            1.0,
            tight(),
        )
        .unwrap();
        state.update_local().unwrap();
        state.refresh_channel_cov(2, 0.0, false).unwrap();
        let raw = state.local_covariances()[2].to_dense_covariance().unwrap();
        state.refresh_channel_cov(2, 1e-6, true).unwrap();
        let k = state.local_covariances()[2].to_dense_covariance().unwrap();
        assert_relative_eq!(k.trace(), 3.0 + 3e-6, epsilon = 1e-10);
        // Same correlations as the raw sample covariance.
        let corr = |m: &DMatrix<f64>, i: usize, j: usize| m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt();
        assert_relative_eq!(corr(&k, 0, 2), corr(&raw, 0, 2), epsilon = 1e-5);
        // The penalty cache follows the new covariance.
        let direct = objective(
            &y,
            &mask,
            None,
            Some(&DenseTensor::new(shape.to_vec(), state.local().to_vec()).unwrap()),
            1.0,
            1.0,
            &[],
            state.local_covariances(),
        )
        .unwrap();
        assert_relative_eq!(state.objective().unwrap(), direct, max_relative = 1e-8);
    }

    #[test]
    fn refresh_identical_channels_stays_pd() {
        let shape = [5, 3];
        let y = DenseTensor::from_fn(&shape, |i| (i[0] as f64).sin()).unwrap();
        let mask = ObservationMask::full(&shape).unwrap();
        let mut state = FitState::new(
            &y,
            &mask,
            None,
            vec![],
            covs(&shape, &KernelSpec::identity()),
            1.0,
            1.0,
            tight(),
        )
        .unwrap();
        state.update_local().unwrap();
        state.refresh_channel_cov(1, 1e-6, true).unwrap();
        let k = state.local_covariances()[1].to_dense_covariance().unwrap();
        assert!(nalgebra::Cholesky::new(k).is_some());
    }

    #[test]
    fn objective_reductions() {
        let shape = [4, 3, 2];
        let (y, mask) = random_problem(&shape, 0.6, 13);
        let ident = covs(&shape, &KernelSpec::identity());
        let zero = FactorSet::new(shape.iter().map(|&n| DMatrix::zeros(n, 2)).collect()).unwrap();
        let zero_r = DenseTensor::zeros(&shape).unwrap();
        let half: f64 = 0.5 * mask.slice(y.data()).iter().map(|v| v * v).sum::<f64>();
        let got = objective(&y, &mask, Some(&zero), Some(&zero_r), 1.0, 1.0, &ident, &ident).unwrap();
        assert_relative_eq!(got, half, epsilon = 1e-14);

        let f = random_factors(&shape, 2, 14);
        let r = DenseTensor::from_fn(&shape, |i| (i[0] + i[1] * i[2]) as f64 * 0.1).unwrap();
        let m = cp_reconstruct(&f).unwrap();
        let data: f64 = mask
            .observed_indices()
            .iter()
            .map(|&n| 0.5 * (y.data()[n] - m.data()[n] - r.data()[n]).powi(2))
            .sum();
        let fro: f64 = f.factors().iter().map(|u| u.norm_squared()).sum();
        let want = data + 0.5 * 0.7 * fro + 0.5 * 0.3 * r.frobenius_norm().powi(2);
        let got = objective(&y, &mask, Some(&f), Some(&r), 0.7, 0.3, &ident, &ident).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn objective_matches_dense_precision() {
        let shape = [3, 4, 2];
        let (y, mask) = random_problem(&shape, 0.5, 15);
        let fk = covs(&shape, &KernelSpec::matern32(1.5));
        let lk = covs(&shape, &KernelSpec::squared_exponential(1.0).with_taper(3.0));
        let f = random_factors(&shape, 2, 16);
        let r = DenseTensor::from_fn(&shape, |i| ((i[0] * 3 + i[1]) as f64).cos()).unwrap();
        let m = cp_reconstruct(&f).unwrap();
        let mut want: f64 = mask
            .observed_indices()
            .iter()
            .map(|&n| 0.5 * (y.data()[n] - m.data()[n] - r.data()[n]).powi(2))
            .sum();
        for (u, k) in f.factors().iter().zip(&fk) {
            let kinv = spd_inverse(&k.to_dense_covariance().unwrap(), 0.0).unwrap();
            want += 0.5 * 0.9 * (u.transpose() * kinv * u).trace();
        }
        let mut kr = lk[0].to_dense_covariance().unwrap();
        for c in &lk[1..] {
            kr = kronecker_dense(&c.to_dense_covariance().unwrap(), &kr);
        }
        let rv = nalgebra::DVector::from_column_slice(r.data());
        want += 0.5 * 0.4 * (rv.transpose() * spd_inverse(&kr, 0.0).unwrap() * &rv)[(0, 0)];
        let got = objective(&y, &mask, Some(&f), Some(&r), 0.9, 0.4, &fk, &lk).unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-8);
    }

    #[test]
    fn cached_objective_agrees_with_direct() {
        let shape = [5, 4, 3];
        let (y, mask) = random_problem(&shape, 0.5, 17);
        let fk = covs(&shape, &KernelSpec::matern32(2.0));
        let lk = covs(&shape, &KernelSpec::matern32(1.0).with_taper(2.0));
        let mut state = FitState::new(
            &y,
            &mask,
            Some(random_factors(&shape, 2, 18)),
            fk.clone(),
            lk.clone(),
            0.8,
            0.6,
            tight(),
        )
        .unwrap();
        for d in 0..3 {
            state.update_factor(d).unwrap();
        }
        state.rebuild_global().unwrap();
        state.update_local().unwrap();
        let r = DenseTensor::new(shape.to_vec(), state.local().to_vec()).unwrap();
        let direct = objective(&y, &mask, state.factors(), Some(&r), 0.8, 0.6, &fk, &lk).unwrap();
        assert_relative_eq!(state.objective().unwrap(), direct, max_relative = 1e-8);
    }

    fn cp_tensor(shape: &[usize], rank: usize, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FactorSet::new(
            shape
                .iter()
                .map(|&n| DMatrix::from_fn(n, rank, |_, _| rng.random_range(0.5..1.5)))
                .collect(),
        )
        .unwrap();
        cp_reconstruct(&f).unwrap()
    }

    fn assert_omega_exact(out: &FitOutput, y: &DenseTensor, mask: &ObservationMask) {
        for &n in mask.observed_indices() {
            assert_eq!(out.completed.data()[n].to_bits(), y.data()[n].to_bits());
        }
    }

    #[test]
    fn lstf_recovers_exact_low_rank() {
        let shape = [6, 5, 4];
        let y = cp_tensor(&shape, 2, 19);
        let mask = ObservationMask::full(&shape).unwrap();
        let cfg = GlskfConfig {
            rank: 2,
            rho: 1e-9,
            mode: Mode::Lstf,
            max_outer: 2000,
            stop_eps: 1e-24,
            cg_tol: 1e-13,
            seed: 3,
            ..GlskfConfig::default()
        };
        let out = Glskf::new(cfg, &shape).unwrap().fit(&y, &mask).unwrap();
        assert_omega_exact(&out, &y, &mask);
        let err: f64 = out
            .global
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            err < 1e-4 * y.frobenius_norm(),
            "relative error {}",
            err / y.frobenius_norm()
        );
    }

    #[test]
    fn glslocal_interpolates_full_observation() {
        let shape = [5, 4];
        let (y, mask) = random_problem(&shape, 2.0, 20);
        let cfg = GlskfConfig {
            mode: Mode::Glslocal,
            gamma: 1e-6,
            rank: 0,
            local_kernels: vec![KernelSpec::matern32(1.0).with_taper(2.0); 2],
            ..GlskfConfig::default()
        };
        let out = Glskf::new(cfg, &shape).unwrap().fit(&y, &mask).unwrap();
        assert_omega_exact(&out, &y, &mask);
        let err: f64 = out
            .local
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-3 * y.frobenius_norm());
        assert!(out.report.converged);
    }

    #[test]
    fn lstf_equals_lskf_with_identity_kernels() {
        let shape = [6, 5, 3];
        let (y, mask) = random_problem(&shape, 0.5, 21);
        let base = GlskfConfig {
            rank: 3,
            max_outer: 12,
            seed: 9,
            ..GlskfConfig::default()
        };
        let lstf = GlskfConfig {
            mode: Mode::Lstf,
            factor_kernels: vec![KernelSpec::matern32(3.0); 3],
            ..base.clone()
        };
        let lskf = GlskfConfig {
            mode: Mode::Lskf,
            ..base
        };
        let a = Glskf::new(lstf, &shape).unwrap().fit(&y, &mask).unwrap();
        let b = Glskf::new(lskf, &shape).unwrap().fit(&y, &mask).unwrap();
        assert_eq!(a.completed, b.completed);
        let objs = |o: &FitOutput| o.report.trace.iter().map(|e| e.objective.to_bits()).collect::<Vec<_>>();
        assert_eq!(objs(&a), objs(&b));
    }

    #[test]
    fn glskf_huge_gamma_matches_lskf() {
        let shape = [6, 5, 3];
        let (y, mask) = random_problem(&shape, 0.6, 22);
        let base = GlskfConfig {
            rank: 2,
            max_outer: 15,
            factor_kernels: vec![KernelSpec::matern32(2.0); 3],
            local_kernels: vec![KernelSpec::matern32(1.0).with_taper(2.0); 3],
            ..GlskfConfig::default()
        };
        let g = Glskf::new(
            GlskfConfig {
                gamma: 1e12,
                ..base.clone()
            },
            &shape,
        )
        .unwrap()
        .fit(&y, &mask)
        .unwrap();
        let l = Glskf::new(
            GlskfConfig {
                mode: Mode::Lskf,
                ..base
            },
            &shape,
        )
        .unwrap()
        .fit(&y, &mask)
        .unwrap();
        assert!(g.local.frobenius_norm() < 1e-8);
        let diff: f64 = g
            .completed
            .data()
            .iter()
            .zip(l.completed.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn glskf_block_descent_and_determinism() {
        let shape = [8, 7, 3];
        let (y, mask) = random_problem(&shape, 0.5, 23);
        let cfg = GlskfConfig {
            rank: 3,
            max_outer: 20,
            factor_kernels: vec![
                KernelSpec::matern32(3.0),
                KernelSpec::matern32(3.0),
                KernelSpec::identity(),
            ],
            local_kernels: vec![
                KernelSpec::matern32(1.0).with_taper(3.0),
                KernelSpec::matern32(1.0).with_taper(3.0),
                KernelSpec::empirical(1e-6),
            ],
            ..GlskfConfig::default()
        };
        let est = Glskf::new(cfg, &shape).unwrap();
        let a = est.fit(&y, &mask).unwrap();
        assert_omega_exact(&a, &y, &mask);
        assert!(a.report.worst_ascent() <= 1e-6, "{}", a.report.worst_ascent());
        assert!(a.report.trace.iter().any(|e| e.stage == Stage::Refresh));
        let b = est.fit(&y, &mask).unwrap();
        assert_eq!(
            a.report.trace.iter().map(|e| e.objective).collect::<Vec<_>>(),
            b.report.trace.iter().map(|e| e.objective).collect::<Vec<_>>()
        );
    }

    #[test]
    fn warmup_skips_local_and_observer_sees_it() {
        let shape = [5, 4, 2];
        let (y, mask) = random_problem(&shape, 0.6, 24);
        let cfg = GlskfConfig {
            rank: 2,
            warmup: 3,
            max_outer: 6,
            stop_eps: 1e-30,
            local_kernels: vec![KernelSpec::matern32(1.0).with_taper(2.0); 3],
            ..GlskfConfig::default()
        };
        let mut seen = Vec::new();
        let mut obs =
            |s: &IterationSnapshot<'_>| seen.push((s.iteration, s.local_active, s.local.iter().any(|&v| v != 0.0)));
        let out = Glskf::new(cfg, &shape)
            .unwrap()
            .fit_with_observer(&y, &mask, &mut obs)
            .unwrap();
        // The fit may stop early once the warm-started solves no longer move.
        let k = out.report.iterations;
        assert!(k > 3 && k <= 6);
        let want: Vec<_> = (0..k).map(|i| (i, i >= 3, i >= 3)).collect();
        assert_eq!(seen, want);
        let locals = out.report.trace.iter().filter(|e| e.stage == Stage::Local).count();
        assert_eq!(locals, k - 3);
    }

    #[test]
    fn config_validation() {
        let ok = GlskfConfig::default();
        assert!(ok.validate(3).is_ok());
        assert!(GlskfConfig {
            warmup: 100,
            ..ok.clone()
        }
        .validate(3)
        .is_err());
        assert!(GlskfConfig { rank: 0, ..ok.clone() }.validate(3).is_err());
        assert!(GlskfConfig {
            rank: 0,
            mode: Mode::Glslocal,
            ..ok.clone()
        }
        .validate(3)
        .is_ok());
        assert!(GlskfConfig { rho: 0.0, ..ok.clone() }.validate(3).is_err());
        assert!(GlskfConfig {
            gamma: -1.0,
            ..ok.clone()
        }
        .validate(3)
        .is_err());
        assert!(GlskfConfig {
            factor_kernels: vec![KernelSpec::identity(); 2],
            ..ok.clone()
        }
        .validate(3)
        .is_err());
        assert!(GlskfConfig {
            local_kernels: vec![KernelSpec::qv(); 3],
            ..ok.clone()
        }
        .validate(3)
        .is_err());
        let emp_first = GlskfConfig {
            local_kernels: vec![
                KernelSpec::empirical(1e-6),
                KernelSpec::identity(),
                KernelSpec::identity(),
            ],
            ..ok.clone()
        };
        assert!(emp_first.validate(3).is_err());
        assert!(GlskfConfig {
            channel_mode: Some(0),
            ..emp_first
        }
        .validate(3)
        .is_ok());
        assert!("bogus".parse::<Mode>().is_err());
        assert_eq!("LSKF".parse::<Mode>().unwrap(), Mode::Lskf);
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = GlskfConfig {
            factor_kernels: vec!["matern32(l=30)".parse().unwrap(), KernelSpec::identity()],
            local_kernels: vec!["matern32(l=5)*bohman(30)".parse().unwrap(), KernelSpec::empirical(1e-6)],
            mode: Mode::Glslocal,
            ..GlskfConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<GlskfConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<GlskfConfig>(r#"{"rnak": 3}"#).is_err());
    }
}
