//! Speckle physics: unit-mean Gamma speckle, the homomorphic (log) transform,
//! the trigamma target variance and synthetic scenes.
//!
//! An `L`-look intensity observation is `y = x·n` with `n ~ Γ(L, 1/L)`. In the
//! log domain the speckle becomes additive, `ln y = ln x + ln n`, and
//! `Var(ln n) = ψ₁(L)`, the trigamma function. That variance is the physics
//! target the statistical loss drives the residual towards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

/// Offset added before taking logs of intensities in `[0, 1]`.
pub const DEFAULT_LOG_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeckleError {
    #[error("number of looks must be positive, got {0}")]
    InvalidLooks(f64),
    #[error("log-variance {value} outside (0, {max}]")]
    VarianceOutOfRange { value: f64, max: f64 },
    #[error("negative intensity {0} cannot be log-transformed")]
    NegativeIntensity(f64),
    #[error("invalid scene request: {0}")]
    InvalidScene(String),
}

pub type Result<T, E = SpeckleError> = std::result::Result<T, E>;

/// Trigamma function `ψ₁(x) = Σ_{k≥0} 1/(x+k)²` for `x > 0`.
///
/// Shifts the argument up to 8 with the recurrence `ψ₁(x) = ψ₁(x+1) + 1/x²`
/// and finishes with the Bernoulli asymptotic series.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(SpeckleError::InvalidLooks(x));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 8.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // 1/x + 1/(2x²) + Σ B₂ₖ / x^(2k+1)
    const BERNOULLI: [f64; 7] =
        [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut term = inv * inv2;
    let mut tail = 0.0;
    for b in BERNOULLI {
        tail += b * term;
        term *= inv2;
    }
    Ok(acc + inv + 0.5 * inv2 + tail)
}

/// Number of looks `L` with `ψ₁(L) = sigma2`, found by bisection.
///
/// Valid for `0 < sigma2 ≤ ψ₁(0.5) = π²/2`.
pub fn looks_from_variance(sigma2: f64) -> Result<f64> {
    let max = trigamma(0.5)?;
    if !(sigma2 > 0.0 && sigma2 <= max) {
        return Err(SpeckleError::VarianceOutOfRange { value: sigma2, max });
    }
    let mut lo = 0.5;
    let mut hi = 1.0;
    while trigamma(hi)? > sigma2 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // ψ₁ is strictly decreasing.
        if trigamma(mid)? > sigma2 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Equivalent number of looks and the matching log-domain target variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeckleSpec {
    pub looks: f64,
    pub sigma2_tgt: f64,
}

impl SpeckleSpec {
    pub fn from_looks(looks: f64) -> Result<Self> {
        Ok(Self { looks, sigma2_tgt: trigamma(looks)? })
    }

    pub fn from_variance(sigma2: f64) -> Result<Self> {
        Ok(Self { looks: looks_from_variance(sigma2)?, sigma2_tgt: sigma2 })
    }
}

/// RNG for stream `stream` under `seed`. Distinct streams are independent, so
/// per-image draws do not depend on the order images are visited in.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws i.i.d. `Γ(L, 1/L)` speckle (unit mean, variance `1/L`) from `rng`.
pub fn sample_speckle_with(shape: impl Into<Shape>, looks: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if !(looks > 0.0 && looks.is_finite()) {
        return Err(SpeckleError::InvalidLooks(looks));
    }
    let shape = shape.into();
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|_| SpeckleError::InvalidLooks(looks))?;
    let data = (0..shape.len())
        .map(|_| (gamma.sample(rng) as f32).max(f32::MIN_POSITIVE))
        .collect();
    Ok(Tensor::new(shape, data).expect("length matches shape"))
}

/// Draws `Γ(L, 1/L)` speckle from the stream seeded by `seed`.
pub fn sample_speckle(shape: impl Into<Shape>, looks: f64, seed: u64) -> Result<Tensor<f32>> {
    sample_speckle_with(shape, looks, &mut stream_rng(seed, 0))
}

/// Homomorphic transform `z = ln(y + eps)`.
pub fn to_log(y: &Tensor<f32>, eps: f64) -> Result<Tensor<f32>> {
    if let Some(&bad) = y.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(SpeckleError::NegativeIntensity(bad as f64));
    }
    Ok(y.map(|v| ((v as f64) + eps).ln() as f32))
}

/// Inverse transform `exp(z)`. The `eps` offset of [`to_log`] is not
/// subtracted, so `from_log(to_log(y, eps)) = y + eps`.
pub fn from_log(z: &Tensor<f32>) -> Tensor<f32> {
    z.map(f32::exp)
}

/// Equivalent number of looks `mean² / var` (population variance), `+∞` for a flat region.
pub fn enl(region: &[f32]) -> f64 {
    let n = region.len() as f64;
    let mean = region.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = region.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        f64::INFINITY
    } else {
        mean * mean / var
    }
}

/// Structure of a synthetic reflectivity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Uniform reflectivity.
    Constant,
    /// Two reflectivity levels in a random arrangement of half-planes and rectangles.
    Piecewise,
    /// Smooth Gaussian bumps over a dark background.
    Blobs,
}

impl std::str::FromStr for SceneKind {
    type Err = SpeckleError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "piecewise" => Ok(Self::Piecewise),
            "blobs" => Ok(Self::Blobs),
            other => Err(SpeckleError::InvalidScene(format!("unknown scene kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Piecewise => "piecewise",
            Self::Blobs => "blobs",
        })
    }
}

/// A clean reflectivity map and one speckled observation of it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub looks_used: f64,
}

const MIN_REFLECTIVITY: f64 = 0.1;
const MAX_REFLECTIVITY: f64 = 1.0;
const CONSTANT_LEVEL: f64 = 0.5;

/// Generates a `size×size` scene with reflectivity in `[0.1, 1]` and `L`-look speckle.
///
/// Scene structure uses stream 0 of `seed` and the speckle stream 1, so the same
/// seed always yields the same pair.
pub fn make_scene(kind: SceneKind, size: usize, contrast: f64, looks: f64, seed: u64) -> Result<SyntheticScene> {
    if size < 32 {
        return Err(SpeckleError::InvalidScene(format!("size {size} < 32")));
    }
    let max_contrast = MAX_REFLECTIVITY / MIN_REFLECTIVITY;
    if !(contrast > 1.0 && contrast <= max_contrast) {
        return Err(SpeckleError::InvalidScene(format!("contrast {contrast} outside (1, {max_contrast}]")));
    }
    let mut rng = stream_rng(seed, 0);
    let shape = Shape::new(1, 1, size, size);
    let hi = MAX_REFLECTIVITY;
    let lo = hi / contrast;
    let clean = match kind {
        SceneKind::Constant => Tensor::full(shape, CONSTANT_LEVEL as f32),
        SceneKind::Piecewise => piecewise(size, lo, hi, &mut rng),
        SceneKind::Blobs => blobs(size, lo, hi, &mut rng),
    };
    let speckle = sample_speckle_with(shape, looks, &mut stream_rng(seed, 1))?;
    let noisy = clean.zip_map(&speckle, |x, n| x * n).expect("same shape");
    Ok(SyntheticScene { clean, noisy, looks_used: looks })
}

fn piecewise(size: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let s = size as f64;
    // One oriented edge through the interior plus a couple of rectangles, toggling the level.
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let rects: Vec<[f64; 4]> = (0..2)
        .map(|_| {
            let w = rng.random_range(0.2 * s..0.4 * s);
            let h = rng.random_range(0.2 * s..0.4 * s);
            let x0 = rng.random_range(0.0..s - w);
            let y0 = rng.random_range(0.0..s - h);
            [x0, y0, x0 + w, y0 + h]
        })
        .collect();
    Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut high = (px - cx) * ca + (py - cy) * sa > 0.0;
        for r in &rects {
            if px >= r[0] && px < r[2] && py >= r[1] && py < r[3] {
                high = !high;
            }
        }
        if high {
            hi as f32
        } else {
            lo as f32
        }
    })
}

fn blobs(size: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let s = size as f64;
    let bumps: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.06 * s..0.15 * s)])
        .collect();
    Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| {
        let v: f64 = bumps
            .iter()
            .map(|b| {
                let d2 = (x as f64 - b[0]).powi(2) + (y as f64 - b[1]).powi(2);
                (-d2 / (2.0 * b[2] * b[2])).exp()
            })
            .sum();
        (lo + (hi - lo) * v.min(1.0)) as f32
    })
}
