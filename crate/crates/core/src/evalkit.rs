//! Despeckling quality metrics.
//!
//! * **M-score** — statistics of the ratio image `ρ = y / (x̂ + ε)` over
//!   automatically selected homogeneous blocks: a block counts when its ENL is
//!   close to the nominal looks and its mean is close to one. Lower is better;
//!   an estimate that leaves no speckle in the ratio (e.g. the identity) scores
//!   `+∞` because no block qualifies.
//! * **EPI** — directional edge preservation relative to the noisy input.
//! * **PSNR** — against a synthetic clean reference.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::rpn::{self, RpnParams};
use crate::speckle::{self, DEFAULT_LOG_EPS};
use crate::tensor::{Axis, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("noisy image has no variation along the {0:?} axis; EPI is undefined")]
    FlatReference(Axis),
    #[error("invalid metric setting: {0}")]
    Config(String),
    #[error("network failure: {0}")]
    Model(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Block selection settings of the M-score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MScoreConfig {
    pub block_size: usize,
    /// Maximum relative ENL deviation `|ENL/L − 1|` of a selected block.
    pub tol_enl: f64,
    /// Maximum deviation `|mean − 1|` of a selected block.
    pub tol_mu: f64,
    /// Lower bound on the denoised image in the ratio. A floor rather than an
    /// additive offset keeps the ratio exactly invariant to joint rescaling.
    pub eps: f64,
}

impl Default for MScoreConfig {
    fn default() -> Self {
        Self { block_size: 25, tol_enl: 0.2, tol_mu: 0.1, eps: DEFAULT_LOG_EPS }
    }
}

impl MScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(EvalError::Config("block_size must be >= 2".into()));
        }
        if !(self.tol_enl > 0.0 && self.tol_mu > 0.0 && self.eps > 0.0) {
            return Err(EvalError::Config("tolerances and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MScoreReport {
    pub block_size: usize,
    pub n_blocks_total: usize,
    pub n_blocks_selected: usize,
    /// Mean of `100·|ENL − L|/L` over selected blocks (NaN when none).
    pub mean_enl_dev_pct: f64,
    /// Mean of `100·|mean − 1|` over selected blocks (NaN when none).
    pub mean_mu_dev_pct: f64,
    pub m_value: f64,
}

/// Ratio image `y / max(x̂, ε)`.
pub fn ratio_image(noisy: &Tensor<f32>, denoised: &Tensor<f32>, eps: f64) -> Result<Tensor<f32>> {
    check_shapes(noisy, denoised)?;
    Ok(noisy.zip_map(denoised, |y, x| (y as f64 / (x as f64).max(eps)) as f32).expect("shapes checked"))
}

/// M-score of `denoised` given its noisy input; every plane of the batch is tiled.
pub fn mscore(noisy: &Tensor<f32>, denoised: &Tensor<f32>, nominal_looks: f64, cfg: &MScoreConfig) -> Result<MScoreReport> {
    mscore_pooled(&[(noisy, denoised)], nominal_looks, cfg)
}

/// M-score over the blocks of several image pairs pooled together.
pub fn mscore_pooled(pairs: &[(&Tensor<f32>, &Tensor<f32>)], nominal_looks: f64, cfg: &MScoreConfig) -> Result<MScoreReport> {
    cfg.validate()?;
    if !(nominal_looks > 0.0) {
        return Err(EvalError::Config(format!("nominal looks must be positive, got {nominal_looks}")));
    }
    let mut total = 0;
    let (mut enl_dev, mut mu_dev, mut selected) = (0.0, 0.0, 0usize);
    for (noisy, denoised) in pairs {
        let rho = ratio_image(noisy, denoised, cfg.eps)?;
        for (mean, e) in block_stats(&rho, cfg.block_size) {
            total += 1;
            if (e / nominal_looks - 1.0).abs() <= cfg.tol_enl && (mean - 1.0).abs() <= cfg.tol_mu {
                selected += 1;
                enl_dev += 100.0 * (e - nominal_looks).abs() / nominal_looks;
                mu_dev += 100.0 * (mean - 1.0).abs();
            }
        }
    }
    let (mean_enl_dev_pct, mean_mu_dev_pct, m_value) = if selected == 0 {
        (f64::NAN, f64::NAN, f64::INFINITY)
    } else {
        let (a, m) = (enl_dev / selected as f64, mu_dev / selected as f64);
        (a, m, (a + m) / 2.0)
    };
    Ok(MScoreReport { block_size: cfg.block_size, n_blocks_total: total, n_blocks_selected: selected, mean_enl_dev_pct, mean_mu_dev_pct, m_value })
}

/// `(mean, ENL)` of every non-overlapping `b × b` block of every plane; edge remainders are skipped.
pub fn block_stats(t: &Tensor<f32>, b: usize) -> Vec<(f64, f64)> {
    let s = t.shape();
    let mut out = Vec::new();
    let mut block = Vec::with_capacity(b * b);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = t.plane(n, c);
            for by in 0..s.h / b {
                for bx in 0..s.w / b {
                    block.clear();
                    for y in by * b..(by + 1) * b {
                        block.extend_from_slice(&plane[y * s.w + bx * b..y * s.w + (bx + 1) * b]);
                    }
                    let mean = block.iter().map(|&v| v as f64).sum::<f64>() / block.len() as f64;
                    out.push((mean, speckle::enl(&block)));
                }
            }
        }
    }
    out
}

/// Looks estimate from noisy images alone: the median ENL of the more
/// homogeneous half of all blocks. Edge-straddling blocks have depressed ENL
/// and fall in the lower half.
pub fn estimate_looks(noisy: &[&Tensor<f32>], block_size: usize) -> Result<f64> {
    let mut enls: Vec<f64> =
        noisy.iter().flat_map(|t| block_stats(t, block_size)).map(|(_, e)| e).filter(|e| e.is_finite()).collect();
    if enls.is_empty() {
        return Err(EvalError::Config(format!("no finite {block_size}x{block_size} blocks to estimate looks from")));
    }
    enls.sort_by(f64::total_cmp);
    let upper = &enls[enls.len() / 2..];
    Ok(upper[upper.len() / 2])
}

fn abs_diff_sum(t: &Tensor<f32>, axis: Axis) -> f64 {
    let s = t.shape();
    let mut acc = 0.0f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let p = t.plane(n, c);
            match axis {
                Axis::Horizontal => {
                    for row in p.chunks_exact(s.w) {
                        acc += row.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum::<f64>();
                    }
                }
                Axis::Vertical => {
                    for y in 1..s.h {
                        acc += (0..s.w).map(|x| (p[y * s.w + x] as f64 - p[(y - 1) * s.w + x] as f64).abs()).sum::<f64>();
                    }
                }
            }
        }
    }
    acc
}

/// Edge preservation index along `axis`: `Σ|∇x̂| / Σ|∇y|`.
pub fn epi(noisy: &Tensor<f32>, denoised: &Tensor<f32>, axis: Axis) -> Result<f64> {
    check_shapes(noisy, denoised)?;
    let den = abs_diff_sum(noisy, axis);
    if den == 0.0 {
        return Err(EvalError::FlatReference(axis));
    }
    Ok(abs_diff_sum(denoised, axis) / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpiReport {
    pub epi_hd: f64,
    pub epi_vd: f64,
}

pub fn epi_both(noisy: &Tensor<f32>, denoised: &Tensor<f32>) -> Result<EpiReport> {
    Ok(EpiReport { epi_hd: epi(noisy, denoised, Axis::Horizontal)?, epi_vd: epi(noisy, denoised, Axis::Vertical)? })
}

/// `10·log10(peak² / MSE)`; `+∞` for a perfect estimate.
pub fn psnr(reference: &Tensor<f32>, estimate: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_shapes(reference, estimate)?;
    if !(peak > 0.0) {
        return Err(EvalError::Config(format!("peak must be positive, got {peak}")));
    }
    let mse = reference.data().iter().zip(estimate.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn check_shapes(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EvalError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub m_value: f64,
    pub n_selected: usize,
    pub epi_hd: f64,
    pub epi_vd: f64,
    pub psnr: Option<f64>,
}

/// Metrics of one noisy/denoised(/clean) triple.
pub fn evaluate_pair(
    image_id: &str,
    noisy: &Tensor<f32>,
    denoised: &Tensor<f32>,
    clean: Option<&Tensor<f32>>,
    nominal_looks: f64,
    cfg: &MScoreConfig,
) -> Result<EvalRow> {
    let m = mscore(noisy, denoised, nominal_looks, cfg)?;
    let e = epi_both(noisy, denoised)?;
    let psnr = clean.map(|c| psnr(c, denoised, 1.0)).transpose()?;
    Ok(EvalRow { image_id: image_id.to_string(), m_value: m.m_value, n_selected: m.n_blocks_selected, epi_hd: e.epi_hd, epi_vd: e.epi_vd, psnr })
}

/// Renders rows as CSV; the `psnr` column is present iff every row has it.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let with_psnr = !rows.is_empty() && rows.iter().all(|r| r.psnr.is_some());
    let mut out = String::from("image_id,m_value,n_selected,epi_hd,epi_vd");
    out.push_str(if with_psnr { ",psnr\n" } else { "\n" });
    for r in rows {
        let _ = write!(out, "{},{},{},{},{}", r.image_id, r.m_value, r.n_selected, r.epi_hd, r.epi_vd);
        if with_psnr {
            let _ = write!(out, ",{}", r.psnr.expect("checked"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub h: usize,
    pub w: usize,
    pub iterations: usize,
    pub images_per_sec: f64,
    pub macs: u64,
    pub hardware: String,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}: {:.3} images/sec over {} iterations, {:.3} GMACs/image, hardware: {}",
            self.h,
            self.w,
            self.images_per_sec,
            self.iterations,
            self.macs as f64 / 1e9,
            self.hardware
        )
    }
}

/// Warm-up iterations excluded from the timing.
pub const BENCH_WARMUP: usize = 3;

/// Single-image inference throughput at `h × w`.
pub fn bench_throughput(params: &RpnParams<f32>, h: usize, w: usize, iterations: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(EvalError::Config("iterations must be >= 1".into()));
    }
    let z = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| ((y * 31 + x * 17) % 97) as f32 / 97.0 - 0.5);
    let run = || rpn::forward(params, &z).map_err(|e| EvalError::Model(e.to_string()));
    for _ in 0..BENCH_WARMUP {
        run()?;
    }
    let start = Instant::now();
    for _ in 0..iterations {
        std::hint::black_box(run()?);
    }
    let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(BenchReport { h, w, iterations, images_per_sec: iterations as f64 / secs, macs: rpn::macs(h, w), hardware: hardware_string() })
}

/// CPU model (when the OS exposes it), architecture and worker count.
pub fn hardware_string() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{model} ({}, {} threads)", std::env::consts::ARCH, rayon::current_num_threads())
}
