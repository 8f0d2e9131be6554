//! MAE, RMSE, PSNR and SSIM, with per-slice averaging.
//!
//! Data are assumed normalized to `[0, 1]`, so PSNR uses peak 1 and SSIM uses
//! dynamic range 1. SSIM uses an 11×11 Gaussian window (σ = 1.5),
//! `K1 = 0.01`, `K2 = 0.03`, and averages over all fully contained windows.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::ObservationMask;
use crate::tensor::DenseTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(truth: &[f64], estimate: &[f64]) -> Result<()> {
    if truth.len() != estimate.len() {
        return Err(Error::dims(format!(
            "truth has {} entries, estimate has {}",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("metrics need at least one entry"));
    }
    Ok(())
}

/// `(MAE, RMSE)`.
pub fn mae_rmse(truth: &[f64], estimate: &[f64]) -> Result<(f64, f64)> {
    check_pair(truth, estimate)?;
    let n = truth.len() as f64;
    let (abs, sq) = truth
        .iter()
        .zip(estimate)
        .fold((0.0, 0.0), |(a, s), (t, e)| (a + (t - e).abs(), s + (t - e) * (t - e)));
    Ok((abs / n, (sq / n).sqrt()))
}

/// `10·log₁₀(1 / MSE)` in dB; `+∞` when the inputs are identical.
pub fn psnr(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    let (_, rmse) = mae_rmse(truth, estimate)?;
    let mse = rmse * rmse;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Number of leading-two-mode slices and their size, for a tensor of order ≥ 2.
fn slicing(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [w, h, rest @ ..] => Ok((*w, *h, rest.iter().product())),
        _ => Err(Error::invalid(format!(
            "slices need at least 2 modes, got shape {shape:?}"
        ))),
    }
}

/// PSNR of every `I₁ × I₂` slice (trailing modes flattened), in `vec` order.
pub fn psnr_per_slice(truth: &DenseTensor, estimate: &DenseTensor) -> Result<Vec<f64>> {
    truth.same_shape(estimate)?;
    let (w, h, _) = slicing(truth.shape())?;
    truth
        .data()
        .chunks(w * h)
        .zip(estimate.data().chunks(w * h))
        .map(|(t, e)| psnr(t, e))
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        *v = (-((k as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of a column-major `w × h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two column-major `w × h` slices.
pub fn ssim(truth: &[f64], estimate: &[f64], w: usize, h: usize) -> Result<f64> {
    check_pair(truth, estimate)?;
    if truth.len() != w * h {
        return Err(Error::dims(format!("slice of {} entries is not {w}x{h}", truth.len())));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mx = filter_valid(truth, w, h, &g);
    let my = filter_valid(estimate, w, h, &g);
    let mxx = filter_valid(&prod(truth, truth), w, h, &g);
    let myy = filter_valid(&prod(estimate, estimate), w, h, &g);
    let mxy = filter_valid(&prod(truth, estimate), w, h, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// SSIM of every `I₁ × I₂` slice (channels / frames), in `vec` order.
pub fn ssim_per_slice(truth: &DenseTensor, estimate: &DenseTensor) -> Result<Vec<f64>> {
    truth.same_shape(estimate)?;
    let (w, h, _) = slicing(truth.shape())?;
    truth
        .data()
        .chunks(w * h)
        .zip(estimate.data().chunks(w * h))
        .map(|(t, e)| ssim(t, e, w, h))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluation summary. MAE, RMSE and PSNR use the held-out entries only
/// (all entries when no mask is given); SSIM uses whole slices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr_per_slice: Vec<f64>,
    pub ssim_per_slice: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Report PSNR as the mean over slices instead of over all held-out entries.
    pub per_slice_psnr: bool,
    /// Compute SSIM (requires slices of at least 11×11).
    pub ssim: bool,
}

impl EvalReport {
    pub fn compute(
        truth: &DenseTensor,
        estimate: &DenseTensor,
        mask: Option<&ObservationMask>,
        opts: EvalOptions,
    ) -> Result<Self> {
        truth.same_shape(estimate)?;
        let held_out: Vec<usize> = match mask {
            Some(m) => {
                m.check_shape(truth)?;
                m.missing_indices()
            }
            None => (0..truth.len()).collect(),
        };
        let pick = |t: &DenseTensor, idx: &[usize]| idx.iter().map(|&n| t.data()[n]).collect::<Vec<_>>();
        let (t, e) = (pick(truth, &held_out), pick(estimate, &held_out));
        let (mae, rmse) = mae_rmse(&t, &e)?;

        let mut psnr_slices = Vec::new();
        let psnr_value = if opts.per_slice_psnr {
            let (w, h, _) = slicing(truth.shape())?;
            let size = w * h;
            let mut start = 0;
            for s in 0..truth.len() / size {
                let end = held_out[start..].partition_point(|&n| n < (s + 1) * size) + start;
                if end > start {
                    let idx = &held_out[start..end];
                    psnr_slices.push(psnr(&pick(truth, idx), &pick(estimate, idx))?);
                }
                start = end;
            }
            Some(mean(&psnr_slices))
        } else {
            Some(psnr(&t, &e)?)
        };
        let ssim_slices = if opts.ssim {
            ssim_per_slice(truth, estimate)?
        } else {
            Vec::new()
        };
        Ok(Self {
            n: held_out.len(),
            mae,
            rmse,
            psnr: psnr_value,
            ssim: opts.ssim.then(|| mean(&ssim_slices)),
            psnr_per_slice: psnr_slices,
            ssim_per_slice: ssim_slices,
        })
    }
}

/// Flat `key=value` record on one line.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} mae={:.6} rmse={:.6}", self.n, self.mae, self.rmse)?;
        if let Some(p) = self.psnr {
            write!(f, " psnr={p:.4}")?;
        }
        if let Some(s) = self.ssim {
            write!(f, " ssim={s:.6}")?;
        }
        Ok(())
    }
}
