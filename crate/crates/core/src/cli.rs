//! The `glskf` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glskf::{Glskf, GlskfConfig, Mode};
use crate::io;
use crate::kernels::{build_covariance_grid, KernelSpec};
use crate::metrics::{EvalOptions, EvalReport, SSIM_WINDOW};
use crate::solvers::{cg_solve_with, CgOptions, FactorSystem, LinearOperator, LocalSystem};
use crate::tensor::{DenseTensor, FactorSet};

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_MAX_ITER: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;
pub const EXIT_NUMERIC: u8 = 70;

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "GLSKF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "glskf",
    version,
    about = "Tensor completion with global-local kernelized factorization"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write the completed tensor.
    Complete(Box<CompleteArgs>),
    /// Generate synthetic ground truth.
    Synth(SynthArgs),
    /// Write a random observation mask.
    Mask(MaskArgs),
    /// Compare an estimate to the truth on held-out entries.
    Eval(EvalArgs),
    /// Time the two system operators as the tensor grows.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Traffic,
    Image,
    Video,
    Mri,
}

impl Preset {
    /// Kernel, rank and weight settings for each data family. The weights are
    /// single points from the usual search grids; tune them per dataset.
    pub fn config(self) -> GlskfConfig {
        let k = |s: &str| s.parse::<KernelSpec>().expect("preset kernel spec");
        let (rank, rho, gamma, fk, lk) = match self {
            Preset::Traffic => (
                20,
                5.0,
                1.0,
                vec![k("rl(l=1)"), k("matern32(l=40)"), k("identity")],
                vec![k("rl(l=1)*bohman(10)"), k("matern32(l=5)*bohman(30)"), k("identity")],
            ),
            Preset::Image => (
                10,
                1.0,
                1.0,
                vec![k("matern32(l=30)"), k("matern32(l=30)"), k("identity")],
                vec![
                    k("matern32(l=5)*bohman(30)"),
                    k("matern32(l=5)*bohman(30)"),
                    k("empirical"),
                ],
            ),
            Preset::Video => (
                10,
                1.0,
                1.0,
                vec![
                    k("matern32(l=30)"),
                    k("matern32(l=30)"),
                    k("identity"),
                    k("matern32(l=5)"),
                ],
                vec![
                    k("matern32(l=5)*bohman(10)"),
                    k("matern32(l=5)*bohman(10)"),
                    k("empirical"),
                    k("matern32(l=5)*bohman(10)"),
                ],
            ),
            Preset::Mri => (
                10,
                1.0,
                1.0,
                vec![k("matern32(l=30)"), k("matern32(l=30)"), k("matern32(l=5)")],
                vec![
                    k("matern32(l=5)*bohman(10)"),
                    k("matern32(l=5)*bohman(10)"),
                    k("matern32(l=5)*bohman(10)"),
                ],
            ),
        };
        GlskfConfig {
            rank,
            rho,
            gamma,
            factor_kernels: fk,
            local_kernels: lk,
            channel_mode: (self == Preset::Video).then_some(2),
            ..GlskfConfig::default()
        }
    }
}

fn parse_kernel(s: &str) -> std::result::Result<KernelSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A comma- or `x`-separated list of extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeArg(pub Vec<usize>);

fn parse_shape(s: &str) -> std::result::Result<ShapeArg, String> {
    let shape = s
        .split([',', 'x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent `{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shape.is_empty() || shape.contains(&0) {
        return Err("shape needs positive extents".into());
    }
    Ok(ShapeArg(shape))
}

/// Model flags; anything left unset falls back to `--config`, then the preset, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Factor kernel per mode (repeat, or give once for all modes).
    #[arg(long = "fk", value_parser = parse_kernel)]
    pub factor_kernels: Vec<KernelSpec>,
    /// Local kernel per mode (repeat, or give once for all modes).
    #[arg(long = "lk", value_parser = parse_kernel)]
    pub local_kernels: Vec<KernelSpec>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub stop_eps: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    /// Use the relative CG stopping rule tol·(1+‖b‖).
    #[arg(long)]
    pub cg_relative: bool,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1-based mode whose local covariance is learned from the residual.
    #[arg(long)]
    pub channel_mode: Option<usize>,
}

#[derive(Deserialize)]
struct ManifestConfig {
    config: GlskfConfig,
}

impl ModelArgs {
    pub fn resolve(&self, ndim: usize) -> Result<GlskfConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(p), _) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<GlskfConfig>(&text)
                    .or_else(|_| serde_json::from_str::<ManifestConfig>(&text).map(|m| m.config))
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            (None, Some(preset)) => preset.config(),
            (None, None) => GlskfConfig::default(),
        };
        let broadcast = |v: &[KernelSpec]| match v.len() {
            1 => vec![v[0].clone(); ndim],
            _ => v.to_vec(),
        };
        if !self.factor_kernels.is_empty() {
            cfg.factor_kernels = broadcast(&self.factor_kernels);
        }
        if !self.local_kernels.is_empty() {
            cfg.local_kernels = broadcast(&self.local_kernels);
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            mode,
            rank,
            rho,
            gamma,
            warmup,
            max_outer,
            stop_eps,
            cg_tol,
            cg_max_iter,
            init_scale,
            seed
        );
        if self.cg_relative {
            cfg.cg_relative = true;
        }
        if let Some(c) = self.channel_mode {
            if c == 0 {
                return Err(Error::Config("channel mode is 1-based".into()));
            }
            cfg.channel_mode = Some(c - 1);
        }
        cfg.validate(ndim)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompleteArgs {
    /// Input tensor: .dten, .csv (long format, needs --shape) or an 8-bit image.
    #[arg(long)]
    pub input: PathBuf,
    /// Observation mask (.dmsk).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Generate a random mask with this sampling rate instead of reading one.
    #[arg(long, conflicts_with = "mask")]
    pub sr: Option<f64>,
    /// Seed for --sr (defaults to the model seed).
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// Tensor shape for CSV input, e.g. 30,24,4.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<ShapeArg>,
    /// Ground truth (.dten or image) for error reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = "glskf-run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_shape, required_unless_present = "image")]
    pub shape: Option<ShapeArg>,
    /// Generate a W,H RGB test image instead of a kernel tensor.
    #[arg(long, value_parser = parse_shape, conflicts_with = "shape")]
    pub image: Option<ShapeArg>,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long = "fk", value_parser = parse_kernel)]
    pub factor_kernels: Vec<KernelSpec>,
    #[arg(long = "lk", value_parser = parse_kernel)]
    pub local_kernels: Vec<KernelSpec>,
    #[arg(long, default_value_t = 1.0)]
    pub local_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "glskf-synth")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MaskArgs {
    #[arg(long, value_parser = parse_shape, required_unless_present = "like")]
    pub shape: Option<ShapeArg>,
    /// Take the shape from this tensor or image.
    #[arg(long, conflicts_with = "shape")]
    pub like: Option<PathBuf>,
    #[arg(long)]
    pub sr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    /// Observed-entry mask; metrics then use the missing entries only.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Average PSNR over frontal slices.
    #[arg(long)]
    pub per_slice: bool,
    #[arg(long)]
    pub no_ssim: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 20_000, 40_000, 80_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 3)]
    pub bandwidth: usize,
    #[arg(long, default_value_t = 0.3)]
    pub sr: f64,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Everything needed to reproduce a `complete` run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub config: GlskfConfig,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub observed: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub fit_seconds: f64,
    pub total_seconds: f64,
    pub relative_error: Option<f64>,
    pub eval: Option<EvalReport>,
}

enum Outcome {
    Done,
    Converged(bool),
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "ppm" | "pgm" | "pnm")
    )
}

fn extension(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// A `.dten` tensor or an 8-bit image.
pub fn load_dense(p: &Path) -> Result<DenseTensor> {
    if is_image(p) {
        io::image_to_tensor(p)
    } else {
        io::read_tensor(p)
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn ssim_ok(shape: &[usize]) -> bool {
    shape.len() >= 2 && shape[0] >= SSIM_WINDOW && shape[1] >= SSIM_WINDOW
}

fn cmd_complete(a: &CompleteArgs, argv: &[String]) -> Result<Outcome> {
    let start = Instant::now();
    let mut inputs = vec![a.input.clone()];
    let mut generated_mask = false;
    let (y, mask, input_is_full) = match extension(&a.input).as_str() {
        "csv" => {
            let shape = a.shape.as_ref().ok_or_else(|| usage("CSV input needs --shape"))?;
            if a.mask.is_some() || a.sr.is_some() {
                return Err(usage("CSV input defines its own mask; drop --mask/--sr"));
            }
            let c = io::read_csv_long(&a.input, &shape.0)?;
            if c.duplicates > 0 {
                eprintln!("warning: {} duplicate rows in {}", c.duplicates, a.input.display());
            }
            (c.tensor, c.mask, false)
        }
        _ => {
            let y = load_dense(&a.input)?;
            let mask = match (&a.mask, a.sr) {
                (Some(m), _) => {
                    inputs.push(m.clone());
                    io::read_mask(m)?
                }
                (None, Some(sr)) => {
                    generated_mask = true;
                    let seed = a.mask_seed.or(a.model.seed).unwrap_or(0);
                    io::make_random_mask(y.shape(), sr, seed)?
                }
                (None, None) => return Err(usage("--mask (or --sr) is required for tensor and image input")),
            };
            mask.check_shape(&y)?;
            (y, mask, generated_mask)
        }
    };
    let cfg = a.model.resolve(y.ndim())?;
    let truth = match &a.truth {
        Some(p) => {
            inputs.push(p.clone());
            let t = load_dense(p)?;
            y.same_shape(&t)?;
            Some(t)
        }
        None if input_is_full => Some(y.clone()),
        None => None,
    };

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let est = Glskf::new(cfg.clone(), y.shape())?;
    let fit_start = Instant::now();
    let out = est.fit(&y, &mask)?;
    let fit_seconds = fit_start.elapsed().as_secs_f64();

    let mut outputs = Vec::new();
    let mut put = |name: &str| {
        let p = a.out.join(name);
        outputs.push(p.clone());
        p
    };
    io::write_tensor(put("completed.dten"), &out.completed)?;
    io::write_tensor(put("global.dten"), &out.global)?;
    io::write_tensor(put("local.dten"), &out.local)?;
    io::write_trace_csv(put("trace.csv"), &out.report)?;
    if generated_mask {
        io::write_mask(put("mask.dmsk"), &mask)?;
    }
    if is_image(&a.input) {
        io::tensor_to_image(&out.completed, put("completed.png"))?;
    }
    let (relative_error, eval) = match &truth {
        Some(t) => {
            let diff: f64 = out
                .completed
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let rel = diff.sqrt() / t.frobenius_norm().max(f64::MIN_POSITIVE);
            let report = (mask.missing_count() > 0)
                .then(|| {
                    EvalReport::compute(
                        t,
                        &out.completed,
                        Some(&mask),
                        EvalOptions {
                            per_slice_psnr: false,
                            ssim: ssim_ok(t.shape()),
                        },
                    )
                })
                .transpose()?;
            (Some(rel), report)
        }
        None => (None, None),
    };
    let manifest_path = a.out.join("manifest.json");
    outputs.push(manifest_path.clone());
    let manifest = RunManifest {
        command: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg,
        shape: y.shape().to_vec(),
        observed: mask.observed_count(),
        inputs,
        outputs,
        iterations: out.report.iterations,
        converged: out.report.converged,
        final_objective: out.report.final_objective(),
        fit_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        relative_error,
        eval: eval.clone(),
    };
    io::write_json(&manifest_path, &manifest)?;
    say!(
        "iterations={} converged={} objective={:.6e} seconds={:.3}",
        manifest.iterations,
        manifest.converged,
        manifest.final_objective,
        fit_seconds
    );
    if let Some(rel) = relative_error {
        say!("relative_error={rel:.6e}");
    }
    if let Some(e) = eval {
        say!("{e}");
    }
    Ok(Outcome::Converged(out.report.converged))
}

fn per_mode(v: &[KernelSpec], ndim: usize, default: &str) -> Result<Vec<KernelSpec>> {
    match v.len() {
        0 => Ok(vec![default.parse()?; ndim]),
        1 => Ok(vec![v[0].clone(); ndim]),
        n if n == ndim => Ok(v.to_vec()),
        n => Err(usage(format!("{n} kernels given for {ndim} modes"))),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if let Some(wh) = &a.image {
        let [w, h] = wh.0[..] else {
            return Err(usage("--image takes W,H"));
        };
        let png = a.out.join("truth.png");
        io::tensor_to_image(&io::make_synthetic_image(w, h, a.seed)?, &png)?;
        // Store the 8-bit values so the two files describe the same image.
        io::write_tensor(a.out.join("truth.dten"), &io::image_to_tensor(&png)?)?;
        say!("wrote {}x{} image to {}", w, h, a.out.display());
        return Ok(Outcome::Done);
    }
    let shape = a.shape.clone().ok_or_else(|| usage("--shape is required"))?.0;
    let spec = io::SyntheticSpec {
        factor_kernels: per_mode(&a.factor_kernels, shape.len(), "matern32(l=5)")?,
        local_kernels: per_mode(&a.local_kernels, shape.len(), "matern32(l=1)*bohman(3)")?,
        shape,
        rank: a.rank,
        local_scale: a.local_scale,
        noise_sd: a.noise,
        seed: a.seed,
    };
    let s = io::make_synthetic(&spec)?;
    io::write_tensor(a.out.join("observed.dten"), &s.observed)?;
    io::write_tensor(a.out.join("signal.dten"), &s.signal())?;
    io::write_tensor(a.out.join("global.dten"), &s.global)?;
    io::write_tensor(a.out.join("local.dten"), &s.local)?;
    say!("wrote synthetic {:?} tensor to {}", spec.shape, a.out.display());
    Ok(Outcome::Done)
}

fn cmd_mask(a: &MaskArgs) -> Result<Outcome> {
    let shape = match (&a.shape, &a.like) {
        (Some(s), _) => s.0.clone(),
        (None, Some(p)) => load_dense(p)?.shape().to_vec(),
        (None, None) => return Err(usage("--shape or --like is required")),
    };
    let m = io::make_random_mask(&shape, a.sr, a.seed)?;
    io::write_mask(&a.out, &m)?;
    say!("observed={} total={}", m.observed_count(), m.len());
    Ok(Outcome::Done)
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let truth = load_dense(&a.truth)?;
    let est = load_dense(&a.estimate)?;
    let mask = a.mask.as_ref().map(io::read_mask).transpose()?;
    let opts = EvalOptions {
        per_slice_psnr: a.per_slice,
        ssim: !a.no_ssim && ssim_ok(truth.shape()),
    };
    let report = EvalReport::compute(&truth, &est, mask.as_ref(), opts)?;
    say!("{report}");
    if let Some(p) = &a.json {
        io::write_json(p, &report)?;
    }
    Ok(Outcome::Done)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub observed: usize,
    pub factor_apply_seconds: f64,
    pub local_apply_seconds: f64,
    pub factor_cg_iteration_seconds: f64,
    pub local_cg_iteration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub rank: usize,
    pub bandwidth: usize,
    pub sr: f64,
    pub reps: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 20_000, 40_000, 80_000],
            rank: 10,
            bandwidth: 3,
            sr: 0.3,
            reps: 5,
            iters: 10,
            seed: 0,
        }
    }
}

fn min_time(reps: usize, mut f: impl FnMut() -> Result<usize>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let count = f()?.max(1);
        best = best.min(t.elapsed().as_secs_f64() / count as f64);
    }
    Ok(best)
}

/// Per-apply and per-CG-iteration wall time of the factor system (mode 1) and
/// the local dual system on `I × 25 × 4` tensors with `I = N / 100`.
pub fn scaling_benchmark(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let (j, k) = (25usize, 4usize);
    let taper = (opts.bandwidth + 1) as f64;
    let local_spec = KernelSpec::matern32(opts.bandwidth.max(1) as f64).with_taper(taper);
    let cg = CgOptions {
        tol: 1e-300,
        max_iter: opts.iters,
        relative: false,
    };
    let mut rows = Vec::new();
    for &n in &opts.sizes {
        let i = (n / (j * k)).max(2);
        let shape = [i, j, k];
        let mask = io::make_random_mask(&shape, opts.sr, opts.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let factors = FactorSet::new(
            shape
                .iter()
                .map(|&e| nalgebra::DMatrix::from_fn(e, opts.rank, |_, _| rng.random_range(0.0..1.0)))
                .collect(),
        )?;
        let h = factors.khatri_rao_except(0)?;
        let precision = build_covariance_grid(i, &"rl(l=1)".parse()?)?;
        let fsys = FactorSystem::new(&h, mask.mode_index(0), &precision, 1.0)?;
        let covs: Vec<_> = shape
            .iter()
            .map(|&e| build_covariance_grid(e, &local_spec))
            .collect::<Result<_>>()?;
        let lsys = LocalSystem::new(&mask, &covs, 1.0)?;

        let vf: Vec<f64> = (0..fsys.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vl: Vec<f64> = (0..lsys.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut yf = vec![0.0; vf.len()];
        let mut yl = vec![0.0; vl.len()];
        let factor_apply = min_time(opts.reps, || {
            fsys.apply(&vf, &mut yf);
            Ok(1)
        })?;
        let local_apply = min_time(opts.reps, || {
            lsys.apply(&vl, &mut yl);
            Ok(1)
        })?;
        let zf = vec![0.0; vf.len()];
        let zl = vec![0.0; vl.len()];
        let factor_iter = min_time(opts.reps, || Ok(cg_solve_with(&fsys, &vf, &zf, &cg)?.1.iterations))?;
        let local_iter = min_time(opts.reps, || Ok(cg_solve_with(&lsys, &vl, &zl, &cg)?.1.iterations))?;
        rows.push(BenchRow {
            n: mask.len(),
            observed: mask.observed_count(),
            factor_apply_seconds: factor_apply,
            local_apply_seconds: local_apply,
            factor_cg_iteration_seconds: factor_iter,
            local_cg_iteration_seconds: local_iter,
        });
    }
    Ok(rows)
}

fn cmd_bench(a: &BenchArgs) -> Result<Outcome> {
    let rows = scaling_benchmark(&BenchOptions {
        sizes: a.sizes.clone(),
        rank: a.rank,
        bandwidth: a.bandwidth,
        sr: a.sr,
        reps: a.reps,
        iters: a.iters,
        seed: 0,
    })?;
    say!(
        "{:>9} {:>9} {:>14} {:>14} {:>14} {:>14}",
        "N",
        "|Omega|",
        "factor_apply",
        "local_apply",
        "factor_iter",
        "local_iter"
    );
    for r in &rows {
        say!(
            "{:>9} {:>9} {:>14.3e} {:>14.3e} {:>14.3e} {:>14.3e}",
            r.n,
            r.observed,
            r.factor_apply_seconds,
            r.local_apply_seconds,
            r.factor_cg_iteration_seconds,
            r.local_cg_iteration_seconds
        );
    }
    for w in rows.windows(2) {
        say!(
            "ratio N={}->{}: factor_iter={:.2} local_iter={:.2}",
            w[0].n,
            w[1].n,
            w[1].factor_cg_iteration_seconds / w[0].factor_cg_iteration_seconds,
            w[1].local_cg_iteration_seconds / w[0].local_cg_iteration_seconds
        );
    }
    if let Some(p) = &a.json {
        io::write_json(p, &rows)?;
    }
    Ok(Outcome::Done)
}

pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::KernelSpec { .. } | Error::ModeOutOfRange { .. } => {
            EXIT_USAGE
        }
        Error::DimensionMismatch(_) | Error::Format { .. } | Error::Io { .. } | Error::Image(_) => EXIT_DATA,
        Error::Singular(_) | Error::Numerical(_) => EXIT_NUMERIC,
    }
}

fn init_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring {THREADS_ENV}={v}: expected a positive integer"),
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_CONVERGED };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    init_threads();
    let echo: Vec<String> = argv.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let res = match &cli.command {
        Command::Complete(a) => cmd_complete(a, &echo),
        Command::Synth(a) => cmd_synth(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(Outcome::Done) | Ok(Outcome::Converged(true)) => EXIT_CONVERGED,
        Ok(Outcome::Converged(false)) => {
            eprintln!("stopped at the iteration limit before meeting the change threshold");
            EXIT_MAX_ITER
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert!(Preset::Traffic.config().validate(3).is_ok());
        assert!(Preset::Image.config().validate(3).is_ok());
        assert!(Preset::Video.config().validate(4).is_ok());
        assert!(Preset::Mri.config().validate(3).is_ok());
        assert_eq!(Preset::Image.config().rank, 10);
        assert_eq!(Preset::Traffic.config().rank, 20);
    }

    #[test]
    fn flags_override_preset() {
        let m = ModelArgs {
            preset: Some(Preset::Image),
            rank: Some(4),
            channel_mode: Some(3),
            factor_kernels: vec![KernelSpec::identity()],
            ..Default::default()
        };
        let cfg = m.resolve(3).unwrap();
        assert_eq!(cfg.rank, 4);
        assert_eq!(cfg.rho, Preset::Image.config().rho);
        assert_eq!(cfg.channel_mode, Some(2));
        assert_eq!(cfg.factor_kernels, vec![KernelSpec::identity(); 3]);
        let bad = ModelArgs {
            channel_mode: Some(0),
            ..Default::default()
        };
        assert!(bad.resolve(3).is_err());
    }

    #[test]
    fn every_subcommand_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        for args in [
            &["glskf", "synth", "--image", "16,16"][..],
            &["glskf", "synth", "--shape", "4,5,6", "--fk", "identity"],
            &["glskf", "mask", "--shape", "4,5", "--sr", "0.5", "--out", "m.dmsk"],
            &[
                "glskf", "complete", "--input", "a.csv", "--shape", "2,3", "--lk", "identity", "--lk", "qv",
            ],
            &["glskf", "eval", "--truth", "a.dten", "--estimate", "b.dten"],
            &["glskf", "bench", "--sizes", "100,200"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("30,24,4").unwrap().0, vec![30, 24, 4]);
        assert_eq!(parse_shape("64x64x3").unwrap().0, vec![64, 64, 3]);
        assert!(parse_shape("3,0").is_err());
        assert!(parse_shape("a").is_err());
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(["glskf", "complete"]), EXIT_USAGE);
        assert_eq!(run(["glskf", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["glskf", "--help"]), EXIT_CONVERGED);
        assert_eq!(exit_code_for(&Error::Numerical("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code_for(&Error::format("f", "bad")), EXIT_DATA);
    }

    #[test]
    fn bench_rows_have_expected_sizes() {
        let rows = scaling_benchmark(&BenchOptions {
            sizes: vec![2000, 4000],
            rank: 3,
            reps: 1,
            iters: 2,
            ..BenchOptions::default()
        })
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![2000, 4000]);
        assert!(rows.iter().all(|r| r.local_cg_iteration_seconds > 0.0));
    }
}
