//! Per-mode covariance and precision operators built from kernel functions.
//!
//! Regularized-Laplacian and QV families are stored precision-first and never
//! inverted for the factor update; grid kernels are stored covariance-first,
//! banded when a Bohman taper is attached.

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize, BandedSymmetric, CsrMatrix};
use crate::tensor::{Identity, ModeOperator};

/// Relative jitter ceiling when a covariance must be inverted densely.
pub const INVERSE_MAX_JITTER: f64 = 1e-6;

/// Default diagonal regularization of the empirical channel covariance.
pub const DEFAULT_EMPIRICAL_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern32,
    SquaredExponential,
    ExponentialGraph,
    RegularizedLaplacian,
    Identity,
    QvDifference,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taper {
    pub range: f64,
}

/// A kernel family with its hyperparameters.
///
/// Parses from and prints to the compact grammar used on the command line:
/// `matern32(l=30,s2=1)`, `matern32(l=5)*bohman(10)`, `rl(l=1,s2=1)`,
/// `identity`, `qv`, `empirical(jitter=1e-6)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
    pub variance: f64,
    pub taper: Option<Taper>,
    /// Diagonal jitter, used by the empirical family.
    pub jitter: f64,
    /// Optional CSV distance matrix for the regularized-Laplacian family.
    pub graph: Option<PathBuf>,
}

impl KernelSpec {
    fn base(family: KernelFamily) -> Self {
        Self {
            family,
            length_scale: 1.0,
            variance: 1.0,
            taper: None,
            jitter: DEFAULT_EMPIRICAL_JITTER,
            graph: None,
        }
    }

    pub fn identity() -> Self {
        Self::base(KernelFamily::Identity)
    }

    pub fn qv() -> Self {
        Self::base(KernelFamily::QvDifference)
    }

    pub fn empirical(jitter: f64) -> Self {
        Self {
            jitter,
            ..Self::base(KernelFamily::Empirical)
        }
    }

    pub fn matern32(length_scale: f64) -> Self {
        Self {
            length_scale,
            ..Self::base(KernelFamily::Matern32)
        }
    }

    pub fn squared_exponential(length_scale: f64) -> Self {
        Self {
            length_scale,
            ..Self::base(KernelFamily::SquaredExponential)
        }
    }

    pub fn exponential(length_scale: f64) -> Self {
        Self {
            length_scale,
            ..Self::base(KernelFamily::ExponentialGraph)
        }
    }

    pub fn regularized_laplacian(length_scale: f64, variance: f64) -> Self {
        Self {
            length_scale,
            variance,
            ..Self::base(KernelFamily::RegularizedLaplacian)
        }
    }

    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self
    }

    pub fn with_taper(mut self, range: f64) -> Self {
        self.taper = Some(Taper { range });
        self
    }

    pub fn is_identity(&self) -> bool {
        self.family == KernelFamily::Identity
    }

    pub fn is_empirical(&self) -> bool {
        self.family == KernelFamily::Empirical
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::KernelSpec {
                spec: self.to_string(),
                reason: reason.to_string(),
            })
        };
        match self.family {
            KernelFamily::Identity => return Ok(()),
            KernelFamily::QvDifference => {
                if self.taper.is_some() {
                    return fail("qv is a precision and cannot be tapered");
                }
                return Ok(());
            }
            KernelFamily::Empirical => {
                if !(self.jitter.is_finite() && self.jitter >= 0.0) {
                    return fail("jitter must be finite and nonnegative");
                }
                if self.taper.is_some() {
                    return fail("empirical covariance cannot be tapered");
                }
                return Ok(());
            }
            _ => {}
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return fail("length scale must be positive");
        }
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return fail("variance must be positive");
        }
        if let Some(t) = self.taper {
            if !(t.range.is_finite() && t.range > 0.0) {
                return fail("taper range must be positive");
            }
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, s2) = (self.length_scale, self.variance);
        match self.family {
            KernelFamily::Identity => write!(f, "identity")?,
            KernelFamily::QvDifference => write!(f, "qv")?,
            KernelFamily::Empirical => write!(f, "empirical(jitter={:e})", self.jitter)?,
            KernelFamily::Matern32 => write!(f, "matern32(l={l},s2={s2})")?,
            KernelFamily::SquaredExponential => write!(f, "se(l={l},s2={s2})")?,
            KernelFamily::ExponentialGraph => write!(f, "exp(l={l},s2={s2})")?,
            KernelFamily::RegularizedLaplacian => {
                write!(f, "rl(l={l},s2={s2}")?;
                if let Some(g) = &self.graph {
                    write!(f, ",graph={}", g.display())?;
                }
                write!(f, ")")?;
            }
        }
        if let Some(t) = self.taper {
            write!(f, "*bohman({})", t.range)?;
        }
        Ok(())
    }
}

impl From<KernelSpec> for String {
    fn from(k: KernelSpec) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| Error::KernelSpec {
            spec: s.to_string(),
            reason,
        };
        let mut spec: Option<KernelSpec> = None;
        let mut taper = None;
        for term in s.split('*').map(str::trim) {
            let (name, args) = split_call(term).map_err(err)?;
            let get = |key: &str, positional: usize| -> std::result::Result<Option<&str>, String> {
                let mut found = None;
                for (i, a) in args.iter().enumerate() {
                    match a {
                        (Some(k), v) if *k == key => found = Some(*v),
                        (None, v) if i == positional => found = Some(*v),
                        (Some(_), _) | (None, _) => {}
                    }
                }
                Ok(found)
            };
            let num = |key: &str, positional: usize, default: f64| -> std::result::Result<f64, String> {
                match get(key, positional)? {
                    Some(v) => v.parse::<f64>().map_err(|_| format!("`{key}` is not a number: `{v}`")),
                    None => Ok(default),
                }
            };
            let known = |allowed: &[&str]| -> std::result::Result<(), String> {
                for (k, _) in &args {
                    if let Some(k) = k {
                        if !allowed.contains(k) {
                            return Err(format!("unknown argument `{k}` for `{name}`"));
                        }
                    }
                }
                Ok(())
            };
            let family = match name {
                "bohman" | "taper" => {
                    known(&["range", "lambda"]).map_err(err)?;
                    let range = match get("range", 0).map_err(err)? {
                        Some(_) => num("range", 0, 0.0).map_err(err)?,
                        None => num("lambda", 0, f64::NAN).map_err(err)?,
                    };
                    if taper.replace(Taper { range }).is_some() {
                        return Err(err("more than one taper".into()));
                    }
                    continue;
                }
                "matern32" | "matern" => KernelFamily::Matern32,
                "se" | "sqexp" | "squared_exponential" | "rbf" => KernelFamily::SquaredExponential,
                "exp" | "exponential" => KernelFamily::ExponentialGraph,
                "rl" | "regularized_laplacian" => KernelFamily::RegularizedLaplacian,
                "identity" | "id" | "i" => KernelFamily::Identity,
                "qv" => KernelFamily::QvDifference,
                "empirical" | "emp" => KernelFamily::Empirical,
                other => return Err(err(format!("unknown kernel `{other}`"))),
            };
            let mut k = KernelSpec::base(family);
            match family {
                KernelFamily::Identity | KernelFamily::QvDifference => {
                    if !args.is_empty() {
                        return Err(err(format!("`{name}` takes no arguments")));
                    }
                }
                KernelFamily::Empirical => {
                    known(&["jitter"]).map_err(err)?;
                    k.jitter = num("jitter", 0, DEFAULT_EMPIRICAL_JITTER).map_err(err)?;
                }
                KernelFamily::RegularizedLaplacian => {
                    known(&["l", "s2", "graph"]).map_err(err)?;
                    k.length_scale = num("l", 0, 1.0).map_err(err)?;
                    k.variance = num("s2", 1, 1.0).map_err(err)?;
                    k.graph = get("graph", usize::MAX).map_err(err)?.map(PathBuf::from);
                }
                _ => {
                    known(&["l", "s2"]).map_err(err)?;
                    k.length_scale = num("l", 0, f64::NAN).map_err(err)?;
                    k.variance = num("s2", 1, 1.0).map_err(err)?;
                }
            }
            if spec.replace(k).is_some() {
                return Err(err("more than one base kernel".into()));
            }
        }
        let mut spec = spec.ok_or_else(|| err("missing base kernel".into()))?;
        spec.taper = taper;
        spec.validate()?;
        Ok(spec)
    }
}

type Args<'a> = Vec<(Option<&'a str>, &'a str)>;

fn split_call(term: &str) -> std::result::Result<(&str, Args<'_>), String> {
    let Some(open) = term.find('(') else {
        if term.is_empty() {
            return Err("empty kernel term".into());
        }
        return Ok((term, Vec::new()));
    };
    let inner = term[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| format!("unbalanced parentheses in `{term}`"))?;
    let name = term[..open].trim();
    let args = inner
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| match a.split_once('=') {
            Some((k, v)) => (Some(k.trim()), v.trim()),
            None => (None, a),
        })
        .collect();
    Ok((name, args))
}

fn check_distance(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::invalid(format!(
            "distance must be finite and nonnegative, got {delta}"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::invalid(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Matérn 3/2: `σ²(1 + √3Δ/l) exp(−√3Δ/l)`.
pub fn matern32(delta: f64, length_scale: f64, variance: f64) -> Result<f64> {
    check_distance(delta)?;
    check_positive("length scale", length_scale)?;
    check_positive("variance", variance)?;
    let s = 3f64.sqrt() * delta / length_scale;
    Ok(variance * (1.0 + s) * (-s).exp())
}

/// Squared exponential: `σ² exp(−Δ² / 2l²)`.
pub fn squared_exponential(delta: f64, length_scale: f64, variance: f64) -> Result<f64> {
    check_distance(delta)?;
    check_positive("length scale", length_scale)?;
    check_positive("variance", variance)?;
    Ok(variance * (-(delta * delta) / (2.0 * length_scale * length_scale)).exp())
}

/// Bohman taper with support `[0, λ)`.
pub fn bohman_taper(delta: f64, range: f64) -> Result<f64> {
    check_distance(delta)?;
    check_positive("taper range", range)?;
    if delta >= range {
        return Ok(0.0);
    }
    let t = delta / range;
    let v = (1.0 - t) * (PI * t).cos() + (PI * t).sin() / PI;
    Ok(v.clamp(0.0, 1.0))
}

/// Network-distance kernel `exp(−Δ / l²)`.
pub fn exponential_graph_weight(delta: f64, length_scale: f64) -> Result<f64> {
    if delta == f64::INFINITY {
        return Ok(0.0);
    }
    check_distance(delta)?;
    check_positive("length scale", length_scale)?;
    Ok((-delta / (length_scale * length_scale)).exp())
}

/// `diag(row sums) − W` for a symmetric nonnegative weight matrix with zero diagonal.
pub fn build_laplacian(weights: &DMatrix<f64>) -> Result<CsrMatrix> {
    if !weights.is_square() {
        return Err(Error::dims("weight matrix must be square"));
    }
    let n = weights.nrows();
    let scale = weights.amax().max(f64::MIN_POSITIVE);
    let mut triplets = Vec::new();
    for i in 0..n {
        if weights[(i, i)] != 0.0 {
            return Err(Error::invalid(format!("weight diagonal ({i},{i}) is nonzero")));
        }
        let mut degree = 0.0;
        for j in 0..n {
            let w = weights[(i, j)];
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!(
                    "weight ({i},{j}) = {w} is not a nonnegative number"
                )));
            }
            if (w - weights[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::invalid(format!("weight matrix is not symmetric at ({i},{j})")));
            }
            if i != j && w != 0.0 {
                triplets.push((i, j, -w));
                degree += w;
            }
        }
        if degree != 0.0 {
            triplets.push((i, i, degree));
        }
    }
    Ok(CsrMatrix::from_triplets(n, triplets))
}

/// Chain graph on `n` nodes with unit spacing and exponential edge weights.
pub fn chain_graph_weights(n: usize, length_scale: f64) -> Result<DMatrix<f64>> {
    let w = exponential_graph_weight(1.0, length_scale)?;
    Ok(DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { w } else { 0.0 }))
}

/// Edge weights `exp(−Δ_ij / l²)` for every finite off-diagonal distance.
pub fn graph_weights_from_distances(distances: &DMatrix<f64>, length_scale: f64) -> Result<DMatrix<f64>> {
    if !distances.is_square() {
        return Err(Error::dims("distance matrix must be square"));
    }
    let mut w = DMatrix::zeros(distances.nrows(), distances.ncols());
    for ((i, j), &d) in distances
        .iter()
        .enumerate()
        .map(|(k, d)| ((k % distances.nrows(), k / distances.nrows()), d))
    {
        if i != j && d.is_finite() {
            w[(i, j)] = exponential_graph_weight(d, length_scale)?;
        }
    }
    Ok(w)
}

/// How a [`CovarianceOperator`] stores its matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Identity(usize),
    DenseCovariance(DMatrix<f64>),
    BandedCovariance(BandedSymmetric),
    SparseCovariance(CsrMatrix),
    SparsePrecision { precision: CsrMatrix, singular: bool },
}

/// A per-mode covariance `K` or its precision `K⁻¹`.
///
/// The side that is not stored is materialized densely on first use and cached.
#[derive(Debug, Clone)]
pub struct CovarianceOperator {
    repr: Representation,
    identity: Identity,
    derived: OnceLock<std::result::Result<DMatrix<f64>, String>>,
}

impl PartialEq for CovarianceOperator {
    fn eq(&self, other: &Self) -> bool {
        self.repr == other.repr
    }
}

impl CovarianceOperator {
    pub fn new(repr: Representation) -> Self {
        let n = match &repr {
            Representation::Identity(n) => *n,
            Representation::DenseCovariance(m) => m.nrows(),
            Representation::BandedCovariance(b) => b.size(),
            Representation::SparseCovariance(c) => c.size(),
            Representation::SparsePrecision { precision, .. } => precision.size(),
        };
        Self {
            repr,
            identity: Identity(n),
            derived: OnceLock::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(Representation::Identity(n))
    }

    pub fn dense(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::dims("covariance must be square"));
        }
        Ok(Self::new(Representation::DenseCovariance(cov)))
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn size(&self) -> usize {
        self.identity.0
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.repr, Representation::Identity(_))
    }

    /// True for a PSD-singular precision (QV); such operators have no covariance.
    pub fn is_singular(&self) -> bool {
        matches!(self.repr, Representation::SparsePrecision { singular: true, .. })
    }

    pub fn is_precision_form(&self) -> bool {
        matches!(self.repr, Representation::SparsePrecision { .. })
    }

    fn derived(&self) -> Result<&DMatrix<f64>> {
        let slot = self.derived.get_or_init(|| {
            let r = match &self.repr {
                Representation::Identity(n) => Ok(DMatrix::identity(*n, *n)),
                Representation::DenseCovariance(m) => spd_inverse(m, INVERSE_MAX_JITTER),
                Representation::BandedCovariance(b) => spd_inverse(&b.to_dense(), INVERSE_MAX_JITTER),
                Representation::SparseCovariance(c) => spd_inverse(&c.to_dense(), INVERSE_MAX_JITTER),
                Representation::SparsePrecision { singular: true, .. } => Err(Error::Singular(
                    "precision is singular; its covariance does not exist".into(),
                )),
                Representation::SparsePrecision { precision, .. } => {
                    spd_inverse(&precision.to_dense(), INVERSE_MAX_JITTER)
                }
            };
            r.map_err(|e| e.to_string())
        });
        slot.as_ref().map_err(|e| Error::Singular(e.clone()))
    }

    /// `K` as a mode operator.
    pub fn covariance_op(&self) -> Result<&dyn ModeOperator> {
        Ok(match &self.repr {
            Representation::Identity(_) => &self.identity,
            Representation::DenseCovariance(m) => m,
            Representation::BandedCovariance(b) => b,
            Representation::SparseCovariance(c) => c,
            Representation::SparsePrecision { .. } => self.derived()?,
        })
    }

    /// `K⁻¹` as a mode operator.
    pub fn precision_op(&self) -> Result<&dyn ModeOperator> {
        Ok(match &self.repr {
            Representation::Identity(_) => &self.identity,
            Representation::SparsePrecision { precision, .. } => precision,
            _ => self.derived()?,
        })
    }

    pub fn to_dense_covariance(&self) -> Result<DMatrix<f64>> {
        Ok(match &self.repr {
            Representation::Identity(n) => DMatrix::identity(*n, *n),
            Representation::DenseCovariance(m) => m.clone(),
            Representation::BandedCovariance(b) => b.to_dense(),
            Representation::SparseCovariance(c) => c.to_dense(),
            Representation::SparsePrecision { .. } => self.derived()?.clone(),
        })
    }

    pub fn to_dense_precision(&self) -> Result<DMatrix<f64>> {
        Ok(match &self.repr {
            Representation::Identity(n) => DMatrix::identity(*n, *n),
            Representation::SparsePrecision { precision, .. } => precision.to_dense(),
            _ => self.derived()?.clone(),
        })
    }

    pub fn apply_covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(self.covariance_op()?, x)
    }

    pub fn apply_precision(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(self.precision_op()?, x)
    }

    fn apply_with(&self, op: &dyn ModeOperator, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.size() {
            return Err(Error::dims(format!(
                "operator of size {} applied to vector of length {}",
                self.size(),
                x.len()
            )));
        }
        let mut y = vec![0.0; x.len()];
        op.apply_fiber(x, &mut y);
        Ok(y)
    }
}

/// Sparse precision `I + σ² Lap` of the regularized-Laplacian kernel.
pub fn rl_precision(lap: &CsrMatrix, variance: f64) -> Result<CovarianceOperator> {
    check_positive("RL variance", variance)?;
    let n = lap.size();
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    for i in 0..n {
        triplets.extend(lap.row(i).map(|(j, v)| (i, j, variance * v)));
    }
    let precision = CsrMatrix::from_triplets(n, triplets);
    Ok(CovarianceOperator::new(Representation::SparsePrecision {
        precision,
        singular: false,
    }))
}

/// QV precision `LᵀL`, `L` the `(n−1)×n` first-difference matrix.
pub fn qv_precision(n: usize) -> Result<CovarianceOperator> {
    if n < 2 {
        return Err(Error::invalid(format!("qv precision needs n >= 2, got {n}")));
    }
    let mut triplets = Vec::with_capacity(3 * n);
    for i in 0..n {
        let diag = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        triplets.push((i, i, diag));
        if i + 1 < n {
            triplets.push((i, i + 1, -1.0));
            triplets.push((i + 1, i, -1.0));
        }
    }
    Ok(CovarianceOperator::new(Representation::SparsePrecision {
        precision: CsrMatrix::from_triplets(n, triplets),
        singular: true,
    }))
}

/// Sample covariance of the `m` row variables over `n` columns, plus `jitter·I`.
pub fn empirical_cov(rows: &DMatrix<f64>, jitter: f64) -> Result<CovarianceOperator> {
    let (m, n) = rows.shape();
    if n < 2 {
        return Err(Error::invalid(format!(
            "empirical covariance needs >= 2 columns, got {n}"
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("empirical covariance input is not finite".into()));
    }
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(Error::invalid(format!("jitter must be nonnegative, got {jitter}")));
    }
    let means = rows.column_mean();
    let mut centered = rows.clone();
    for mut col in centered.column_iter_mut() {
        col -= &means;
    }
    let mut cov = &centered * centered.transpose() / (n as f64 - 1.0);
    for i in 0..m {
        cov[(i, i)] += jitter;
    }
    CovarianceOperator::dense(symmetrize(cov))
}

fn grid_distance(i: usize, j: usize) -> f64 {
    i.abs_diff(j) as f64
}

/// Per-mode operator for a regular grid `1..n` with `Δ_ij = |i − j|`.
pub fn build_covariance_grid(n: usize, spec: &KernelSpec) -> Result<CovarianceOperator> {
    build_covariance(n, spec, None)
}

/// Like [`build_covariance_grid`] but with an optional distance matrix
/// replacing grid distances (used for graph kernels and their tapers).
pub fn build_covariance(n: usize, spec: &KernelSpec, distances: Option<&DMatrix<f64>>) -> Result<CovarianceOperator> {
    if n == 0 {
        return Err(Error::invalid("grid size must be positive"));
    }
    spec.validate()?;
    if let Some(d) = distances {
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::dims(format!(
                "distance matrix is {:?}, mode size is {n}",
                d.shape()
            )));
        }
    }
    let dist = |i: usize, j: usize| match distances {
        Some(d) => d[(i, j)],
        None => grid_distance(i, j),
    };
    let (l, s2) = (spec.length_scale, spec.variance);
    let base: Box<dyn Fn(f64) -> Result<f64>> = match spec.family {
        KernelFamily::Identity | KernelFamily::Empirical => {
            return Ok(CovarianceOperator::identity(n));
        }
        KernelFamily::QvDifference => return qv_precision(n),
        KernelFamily::RegularizedLaplacian => {
            let weights = match distances {
                Some(d) => graph_weights_from_distances(d, l)?,
                None => chain_graph_weights(n, l)?,
            };
            let precision = rl_precision(&build_laplacian(&weights)?, s2)?;
            let Some(taper) = spec.taper else {
                return Ok(precision);
            };
            let cov = precision.to_dense_covariance()?;
            return tapered(n, taper, distances, |i, j| Ok(cov[(i, j)]));
        }
        KernelFamily::Matern32 => Box::new(move |d| matern32(d, l, s2)),
        KernelFamily::SquaredExponential => Box::new(move |d| squared_exponential(d, l, s2)),
        KernelFamily::ExponentialGraph => Box::new(move |d| Ok(s2 * exponential_graph_weight(d, l)?)),
    };
    match spec.taper {
        Some(taper) => tapered(n, taper, distances, |i, j| base(dist(i, j))),
        None => {
            let mut cov = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..=j {
                    let v = base(dist(i, j))?;
                    cov[(i, j)] = v;
                    cov[(j, i)] = v;
                }
            }
            CovarianceOperator::dense(cov)
        }
    }
}

fn tapered(
    n: usize,
    taper: Taper,
    distances: Option<&DMatrix<f64>>,
    base: impl Fn(usize, usize) -> Result<f64>,
) -> Result<CovarianceOperator> {
    match distances {
        None => {
            // Δ is an integer on the grid, so Δ < λ ⇔ Δ ≤ ⌈λ⌉ − 1.
            let bandwidth = (taper.range.ceil() as usize).saturating_sub(1);
            let mut failure = None;
            let band = BandedSymmetric::from_fn(n, bandwidth, |i, j| {
                let v = base(i, j).and_then(|b| Ok(b * bohman_taper(grid_distance(i, j), taper.range)?));
                v.unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    0.0
                })
            });
            match failure {
                Some(e) => Err(e),
                None => Ok(CovarianceOperator::new(Representation::BandedCovariance(band))),
            }
        }
        Some(d) => {
            let mut triplets = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let delta = if i == j { 0.0 } else { d[(i, j)] };
                    if !delta.is_finite() || delta >= taper.range {
                        continue;
                    }
                    let v = base(i, j)? * bohman_taper(delta, taper.range)?;
                    if v != 0.0 {
                        triplets.push((i, j, v));
                    }
                }
            }
            Ok(CovarianceOperator::new(Representation::SparseCovariance(
                CsrMatrix::from_triplets(n, triplets),
            )))
        }
    }
}
