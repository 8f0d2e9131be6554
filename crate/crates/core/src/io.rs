//! On-disk formats, image ingestion, and synthetic data / mask generators.
//!
//! `DTEN` (tensor) and `DMSK` (mask) share one little-endian layout:
//!
//! ```text
//! magic[4] | version u8 = 1 | ndim u8 | extents u64 × ndim | payload
//! ```
//!
//! The tensor payload is `f64` in `vec` order (first index fastest); the mask
//! payload is one byte (0 or 1) per entry in the same order.
//!
//! Random masks use `ChaCha8Rng::seed_from_u64(seed)` and a partial
//! Fisher–Yates shuffle of `0..N`: for `i` in `0..m`, swap position `i` with
//! a uniform draw from `i..N`; the first `m` positions are observed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glskf::FitReport;
use crate::kernels::{build_covariance, CovarianceOperator, KernelSpec};
use crate::linalg::cholesky_with_jitter;
use crate::mask::ObservationMask;
use crate::tensor::{cp_reconstruct, kron_mvm, DenseTensor, FactorSet, ModeOperator};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTEN";
pub const MASK_MAGIC: &[u8; 4] = b"DMSK";
pub const FORMAT_VERSION: u8 = 1;

/// Largest tensor `make_synthetic` will build with dense Cholesky factors.
pub const SYNTHETIC_MAX_LEN: usize = 100_000;

fn write_header(w: &mut impl Write, magic: &[u8; 4], shape: &[usize]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&[FORMAT_VERSION, shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<(Vec<usize>, usize)> {
    let fmt = |reason: String| Error::format(path, reason);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| fmt("truncated header".into()))?;
    if &head[..4] != magic {
        return Err(fmt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..4]),
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    if head[4] != FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {}", head[4])));
    }
    let ndim = head[5] as usize;
    if ndim == 0 {
        return Err(fmt("ndim is 0".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut len: usize = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| fmt("truncated extents".into()))?;
        let e = usize::try_from(u64::from_le_bytes(b)).map_err(|_| fmt("extent overflow".into()))?;
        if e == 0 {
            return Err(fmt("zero extent".into()));
        }
        len = len.checked_mul(e).ok_or_else(|| fmt("extent overflow".into()))?;
        shape.push(e);
    }
    Ok((shape, len))
}

fn read_payload(r: &mut impl Read, bytes: usize, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() != bytes {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {bytes}", buf.len()),
        ));
    }
    Ok(buf)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let path = path.as_ref();
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("too many modes for the DTEN header"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        write_header(&mut w, TENSOR_MAGIC, t.shape())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (shape, len) = read_header(&mut r, TENSOR_MAGIC, path)?;
    let bytes = len
        .checked_mul(8)
        .ok_or_else(|| Error::format(path, "extent overflow"))?;
    let buf = read_payload(&mut r, bytes, path)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DenseTensor::new(shape, data)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &ObservationMask) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let payload: Vec<u8> = mask.as_bools().iter().map(|&o| o as u8).collect();
    let res = (|| {
        write_header(&mut w, MASK_MAGIC, mask.shape())?;
        w.write_all(&payload)?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ObservationMask> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (shape, len) = read_header(&mut r, MASK_MAGIC, path)?;
    let buf = read_payload(&mut r, len, path)?;
    let bools = buf
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(path, format!("mask byte {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationMask::from_bools(&shape, bools)
}

/// Result of long-format CSV ingestion. Missing entries hold NaN.
#[derive(Debug, Clone)]
pub struct CsvTensor {
    pub tensor: DenseTensor,
    pub mask: ObservationMask,
    pub duplicates: usize,
}

/// Reads rows `i_1,…,i_D,value` (1-based). A blank value marks the entry
/// missing; a repeated index overwrites the earlier row and is counted.
/// A first line whose indices are not integers is treated as a header.
pub fn read_csv_long(path: impl AsRef<Path>, shape: &[usize]) -> Result<CsvTensor> {
    let path = path.as_ref();
    let mut t = DenseTensor::zeros(shape)?;
    let n = t.len();
    let d = shape.len();
    let mut state = vec![0u8; n]; // 0 absent, 1 observed, 2 explicitly blank
    let mut duplicates = 0;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut idx = vec![0usize; d];
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |reason: String| Error::format(path, format!("row {}: {reason}", line + 1));
        if rec.len() != d + 1 {
            return Err(bad(format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        let parsed: std::result::Result<Vec<usize>, _> = (0..d).map(|k| rec[k].parse::<usize>()).collect();
        let raw = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(bad(format!("bad index: {e}"))),
        };
        for k in 0..d {
            if raw[k] == 0 || raw[k] > shape[k] {
                return Err(bad(format!(
                    "index {} of mode {} outside 1..={}",
                    raw[k],
                    k + 1,
                    shape[k]
                )));
            }
            idx[k] = raw[k] - 1;
        }
        let lin = t.linear_index(&idx);
        if state[lin] != 0 {
            duplicates += 1;
        }
        let value = rec[d].trim();
        if value.is_empty() {
            state[lin] = 2;
            continue;
        }
        let v: f64 = value.parse().map_err(|e| bad(format!("bad value `{value}`: {e}")))?;
        if !v.is_finite() {
            return Err(bad(format!("value `{value}` is not finite")));
        }
        t.data_mut()[lin] = v;
        state[lin] = 1;
    }
    if duplicates > 0 {
        log::warn!("{}: {duplicates} duplicate index rows (last one kept)", path.display());
    }
    for (v, &s) in t.data_mut().iter_mut().zip(&state) {
        if s != 1 {
            *v = f64::NAN;
        }
    }
    let mask = ObservationMask::from_bools(shape, state.iter().map(|&s| s == 1).collect())?;
    Ok(CsvTensor {
        tensor: t,
        mask,
        duplicates,
    })
}

/// Square matrix of pairwise distances, one CSV row per node. Blank cells and
/// `inf` mean "not connected".
pub fn read_distance_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| match s {
                "" => Ok(f64::INFINITY),
                s => s
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("bad distance `{s}`: {e}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::format(path, "distance matrix must be square and non-empty"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Covariance for one mode, loading the `graph=` distance file when present.
pub fn build_mode_covariance(n: usize, spec: &KernelSpec) -> Result<CovarianceOperator> {
    match &spec.graph {
        Some(p) => build_covariance(n, spec, Some(&read_distance_matrix(p)?)),
        None => build_covariance(n, spec, None),
    }
}

/// Loads an 8-bit grayscale or RGB(A) image as a `columns × rows × channels`
/// tensor in `[0, 1]`; alpha is dropped.
pub fn image_to_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    decoded_to_tensor(img)
}

fn decoded_to_tensor(img: DynamicImage) -> Result<DenseTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            DenseTensor::from_fn(&[w, h, 1], |i| g.get_pixel(i[0] as u32, i[1] as u32)[0] as f64 / 255.0)
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let c = img.to_rgb8();
            DenseTensor::from_fn(&[w, h, 3], |i| {
                c.get_pixel(i[0] as u32, i[1] as u32)[i[2]] as f64 / 255.0
            })
        }
        other => Err(Error::Image(format!(
            "unsupported pixel format {:?}; only 8-bit images are accepted",
            other.color()
        ))),
    }
}

/// Inverse of [`image_to_tensor`]: clamps to `[0, 1]` and quantizes to 8 bits.
/// 3-way tensors with 1 or 3 channels (or 2-way grayscale) are accepted.
pub fn tensor_to_image(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h, c) = match *t.shape() {
        [w, h] => (w, h, 1),
        [w, h, c] if c == 1 || c == 3 => (w, h, c),
        _ => {
            return Err(Error::Image(format!(
                "cannot write shape {:?} as an image (need W×H, W×H×1 or W×H×3)",
                t.shape()
            )))
        }
    };
    let q = |x: usize, y: usize, ch: usize| -> u8 {
        let v = t.data()[x + w * (y + h * ch)];
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    };
    let (wu, hu) = (w as u32, h as u32);
    let res = if c == 1 {
        ImageBuffer::<Luma<u8>, _>::from_fn(wu, hu, |x, y| Luma([q(x as usize, y as usize, 0)])).save(path)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_fn(wu, hu, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(x, y, 0), q(x, y, 1), q(x, y, 2)])
        })
        .save(path)
    };
    res.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Exactly `round(sr·N)` observed entries, uniform without replacement.
pub fn make_random_mask(shape: &[usize], sr: f64, seed: u64) -> Result<ObservationMask> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {sr}")));
    }
    let n = DenseTensor::zeros(shape)?.len();
    let m = (sr * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!("sampling rate {sr} selects no entries of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    ObservationMask::from_linear(shape, &perm[..m])
}

/// Parameters of the smooth-plus-local synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub shape: Vec<usize>,
    pub rank: usize,
    /// One spec per mode for the factor columns.
    pub factor_kernels: Vec<KernelSpec>,
    /// One spec per mode for the local field.
    pub local_kernels: Vec<KernelSpec>,
    /// Multiplies the local field; 0 gives an exactly rank-`rank` tensor before noise.
    pub local_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    /// 𝒴 = ℳ + ℛ + noise.
    pub observed: DenseTensor,
    pub global: DenseTensor,
    pub local: DenseTensor,
    pub factors: FactorSet,
}

impl Synthetic {
    /// ℳ + ℛ, the noise-free signal.
    pub fn signal(&self) -> DenseTensor {
        let data = self
            .global
            .data()
            .iter()
            .zip(self.local.data())
            .map(|(a, b)| a + b)
            .collect();
        DenseTensor::new(self.global.shape().to_vec(), data).expect("same shape")
    }
}

fn cholesky_factor(n: usize, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    if spec.is_empirical() {
        return Err(Error::invalid("empirical kernels cannot generate synthetic data"));
    }
    let cov = build_mode_covariance(n, spec)?.to_dense_covariance()?;
    let (chol, _) = cholesky_with_jitter(&cov, 1e-6)?;
    Ok(chol.l())
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws kernel-correlated CP factors and a Kronecker-correlated local field.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    let shape = &spec.shape;
    let n = DenseTensor::zeros(shape)?.len();
    if n > SYNTHETIC_MAX_LEN {
        return Err(Error::invalid(format!(
            "synthetic tensors are limited to {SYNTHETIC_MAX_LEN} entries, shape {shape:?} has {n}"
        )));
    }
    if spec.rank == 0 {
        return Err(Error::invalid("synthetic rank must be >= 1"));
    }
    for (name, ks) in [("factor", &spec.factor_kernels), ("local", &spec.local_kernels)] {
        if ks.len() != shape.len() {
            return Err(Error::dims(format!(
                "{} {name} kernels for {} modes",
                ks.len(),
                shape.len()
            )));
        }
    }
    if !(spec.noise_sd >= 0.0 && spec.local_scale >= 0.0) {
        return Err(Error::invalid("noise_sd and local_scale must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut factors = Vec::with_capacity(shape.len());
    for (&i_d, k) in shape.iter().zip(&spec.factor_kernels) {
        let l = cholesky_factor(i_d, k)?;
        let xi = DMatrix::from_column_slice(i_d, spec.rank, &normals(&mut rng, i_d * spec.rank));
        factors.push(l * xi);
    }
    let factors = FactorSet::new(factors)?;
    let global = cp_reconstruct(&factors)?;

    let ls = shape
        .iter()
        .zip(&spec.local_kernels)
        .map(|(&i_d, k)| cholesky_factor(i_d, k))
        .collect::<Result<Vec<_>>>()?;
    let ops: Vec<&dyn ModeOperator> = ls.iter().map(|l| l as &dyn ModeOperator).collect();
    let local: Vec<f64> = kron_mvm(&ops, &normals(&mut rng, n))?
        .into_iter()
        .map(|v| v * spec.local_scale)
        .collect();
    let noise = normals(&mut rng, n);
    let observed = global
        .data()
        .iter()
        .zip(&local)
        .zip(&noise)
        .map(|((g, r), e)| g + r + spec.noise_sd * e)
        .collect();
    Ok(Synthetic {
        observed: DenseTensor::new(shape.clone(), observed)?,
        global,
        local: DenseTensor::new(shape.clone(), local)?,
        factors,
    })
}

/// A smooth RGB test image (`width × height × 3`, values in `[0, 1]`) with
/// large-scale gradients, soft blobs and fine texture.
pub fn make_synthetic_image(width: usize, height: usize, seed: u64) -> Result<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<[f64; 6]> = (0..6)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ]
        })
        .collect();
    let phase: [f64; 3] = [
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
    ];
    DenseTensor::from_fn(&[width, height, 3], |i| {
        let x = i[0] as f64 / width.max(1) as f64;
        let y = i[1] as f64 / height.max(1) as f64;
        let c = i[2];
        let mut v = 0.45 + 0.2 * (2.0 * x - 1.0) * [1.0, 0.5, -0.6][c] + 0.15 * (y - 0.5) * [0.3, 1.0, 0.8][c];
        for b in &blobs {
            let r2 = ((x - b[0]).powi(2) + (y - b[1]).powi(2)) / (b[2] * b[2]);
            v += b[3 + c] * (-r2).exp();
        }
        v += 0.04 * (18.0 * x + 11.0 * y + phase[c]).sin();
        v.clamp(0.0, 1.0)
    })
}

/// Writes one line per block update: `outer,stage,objective,cg_iterations,cg_converged,seconds`.
pub fn write_trace_csv(path: impl AsRef<Path>, report: &FitReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for e in &report.trace {
        w.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON.
pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
