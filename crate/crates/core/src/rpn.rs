//! Residual prediction network.
//!
//! An isotropic ConvNeXt-style network that maps a log-intensity image `z` to
//! its estimated log-speckle residual `f(z)`:
//!
//! ```text
//! stem 3×3 (1→96)
//! 2 × [ dw 7×7 → LN → 1×1 (96→384) → GELU → 1×1 (384→96) → ×γ_k → +skip ]
//! head 3×3 (96→1)
//! ```
//!
//! There is no downsampling anywhere, so output and input share one grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::speckle::{self, SpeckleError};
use crate::tensor::gradcheck::{check, project, random_tensor, GradCheckReport, FD_STEP};
use crate::tensor::{Graph, Padding, Real, Shape, Tensor, TensorError, Var};

pub const WIDTH: usize = 96;
pub const EXPANSION: usize = 4;
pub const BLOCKS: usize = 2;
pub const DW_KERNEL: usize = 7;
pub const LN_EPS: f64 = 1e-6;
pub const LAYER_SCALE_INIT: f64 = 1e-2;
/// Scalar parameter count of the network.
pub const PARAM_COUNT: usize = 160_417;

const STEM_W: usize = 0;
const STEM_B: usize = 1;
const PER_BLOCK: usize = 9;
const HEAD_W: usize = 2 + BLOCKS * PER_BLOCK;
const HEAD_B: usize = HEAD_W + 1;

// Offsets inside a block.
const DW_W: usize = 0;
const DW_B: usize = 1;
const LN_SCALE: usize = 2;
const LN_SHIFT: usize = 3;
const EXPAND_W: usize = 4;
const EXPAND_B: usize = 5;
const PROJECT_W: usize = 6;
const PROJECT_B: usize = 7;
const LAYER_SCALE: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum RpnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Speckle(#[from] SpeckleError),
    #[error("input must have exactly one channel, got {0}")]
    Channels(usize),
    #[error("input {0} is smaller than the {DW_KERNEL}x{DW_KERNEL} kernel support")]
    TooSmall(Shape),
    #[error("parameter '{name}' has shape {got}, expected {expected}")]
    ParamShape { name: String, got: Shape, expected: Shape },
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
}

pub type Result<T, E = RpnError> = std::result::Result<T, E>;

/// Names and shapes of every parameter tensor, in storage order.
pub fn layout() -> Vec<(String, Shape)> {
    let hidden = WIDTH * EXPANSION;
    let vec = |n| Shape::new(n, 1, 1, 1);
    let mut out = vec![
        ("stem.weight".to_string(), Shape::new(WIDTH, 1, 3, 3)),
        ("stem.bias".to_string(), vec(WIDTH)),
    ];
    for k in 0..BLOCKS {
        let p = |s: &str| format!("blocks.{k}.{s}");
        out.extend([
            (p("dwconv.weight"), Shape::new(WIDTH, 1, DW_KERNEL, DW_KERNEL)),
            (p("dwconv.bias"), vec(WIDTH)),
            (p("norm.scale"), vec(WIDTH)),
            (p("norm.shift"), vec(WIDTH)),
            (p("expand.weight"), Shape::new(hidden, WIDTH, 1, 1)),
            (p("expand.bias"), vec(hidden)),
            (p("project.weight"), Shape::new(WIDTH, hidden, 1, 1)),
            (p("project.bias"), vec(WIDTH)),
            (p("layer_scale"), vec(WIDTH)),
        ]);
    }
    out.push(("head.weight".to_string(), Shape::new(1, WIDTH, 3, 3)));
    out.push(("head.bias".to_string(), vec(1)));
    out
}

/// Multiply-accumulate operations of one forward pass on an `h×w` image.
///
/// Every convolution weight contributes one MAC per weight per output pixel;
/// normalization and activations are not counted.
pub fn macs(h: usize, w: usize) -> u64 {
    let per_pixel: usize = layout()
        .iter()
        .filter(|(name, _)| name.ends_with(".weight"))
        .map(|(_, s)| s.len())
        .sum();
    per_pixel as u64 * (h * w) as u64
}

/// Parameters of the residual prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnParams<T = f32> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> RpnParams<T> {
    /// Wraps tensors given in [`layout`] order, checking every shape.
    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Result<Self> {
        let spec = layout();
        if tensors.len() != spec.len() {
            return Err(RpnError::ParamCount { expected: spec.len(), got: tensors.len() });
        }
        for ((name, expected), t) in spec.iter().zip(&tensors) {
            if t.shape() != *expected {
                return Err(RpnError::ParamShape { name: name.clone(), got: t.shape(), expected: *expected });
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        layout().into_iter().map(|(n, _)| n).zip(&self.tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> RpnParams<U> {
        RpnParams { tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn head_weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensors[HEAD_W]
    }

    /// Records every parameter as a leaf of `g`.
    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }
}

/// Builds a freshly initialized network.
///
/// Convolution weights are truncated normals (±2σ) with `σ = 1/√fan_in`;
/// biases are zero, norm scales one, layer scales `1e-2`. The head is zero,
/// so the new network predicts a zero residual and despeckles as the identity.
pub fn build_rpn(init_seed: u64) -> RpnParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let tensors = layout()
        .into_iter()
        .map(|(name, shape)| {
            if name.starts_with("head.") || name.ends_with(".bias") || name.ends_with("norm.shift") {
                Tensor::zeros(shape)
            } else if name.ends_with("norm.scale") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("layer_scale") {
                Tensor::full(shape, LAYER_SCALE_INIT as f32)
            } else {
                let fan_in = shape.c * shape.h * shape.w;
                truncated_normal(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            }
        })
        .collect();
    let params = RpnParams::from_tensors(tensors).expect("layout shapes");
    assert_eq!(params.param_count(), PARAM_COUNT);
    params
}

fn truncated_normal(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..shape.len())
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() <= 2.0 {
                break (v * std) as f32;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn check_input(s: Shape) -> Result<()> {
    if s.c != 1 {
        return Err(RpnError::Channels(s.c));
    }
    if s.h < DW_KERNEL || s.w < DW_KERNEL {
        return Err(RpnError::TooSmall(s));
    }
    Ok(())
}

fn stem<T: Real>(g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
    Ok(g.conv2d(z, p[STEM_W], p[STEM_B], Padding::Reflect)?)
}

fn block<T: Real>(g: &mut Graph<T>, p: &[Var], k: usize, x: Var) -> Result<Var> {
    let b = 2 + k * PER_BLOCK;
    let h = g.depthwise_conv2d(x, p[b + DW_W], p[b + DW_B], Padding::Reflect)?;
    let h = g.layer_norm_channels(h, p[b + LN_SCALE], p[b + LN_SHIFT], T::lit(LN_EPS))?;
    let h = g.pointwise_conv(h, p[b + EXPAND_W], p[b + EXPAND_B])?;
    let h = g.gelu(h)?;
    let h = g.pointwise_conv(h, p[b + PROJECT_W], p[b + PROJECT_B])?;
    let h = g.scale_by_channel(h, p[b + LAYER_SCALE])?;
    Ok(g.add(x, h)?)
}

fn head<T: Real>(g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
    Ok(g.conv2d(x, p[HEAD_W], p[HEAD_B], Padding::Reflect)?)
}

/// Records the network on `g`. `params` are the leaves returned by [`RpnParams::register`].
pub fn forward_graph<T: Real>(g: &mut Graph<T>, params: &[Var], z: Var) -> Result<Var> {
    check_input(g.shape(z))?;
    let mut x = stem(g, params, z)?;
    for k in 0..BLOCKS {
        x = block(g, params, k, x)?;
    }
    head(g, params, x)
}

/// Residual estimate `f(z)` without gradient bookkeeping.
///
/// Runs stage by stage on short-lived graphs so only one block's
/// activations are alive at a time.
pub fn forward<T: Real>(params: &RpnParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(z.shape())?;
    let stage = |input: Tensor<T>, f: &dyn Fn(&mut Graph<T>, &[Var], Var) -> Result<Var>| -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let x = g.constant(input);
        let out = f(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    };
    let mut x = stage(z.clone(), &|g, p, x| stem(g, p, x))?;
    for k in 0..BLOCKS {
        x = stage(x, &|g, p, x| block(g, p, k, x))?;
    }
    stage(x, &|g, p, x| head(g, p, x))
}

/// Nodes of a differentiable despeckling pass.
#[derive(Debug, Clone, Copy)]
pub struct DespeckleVars {
    /// Log observation `z = ln(y + ε)` (constant).
    pub z: Var,
    /// Predicted residual `f(z)`.
    pub residual: Var,
    /// Despeckled log image `ẑ = z − f(z)`.
    pub z_hat: Var,
    /// Despeckled intensity `x̂ = exp(ẑ)`.
    pub x_hat: Var,
    /// Log-ratio residual `r = z − ln x̂`.
    pub r: Var,
}

/// Records `z ↦ (ẑ, x̂, r)` on `g` for a batch of log intensities.
pub fn despeckle_graph<T: Real>(g: &mut Graph<T>, params: &[Var], z: Tensor<T>) -> Result<DespeckleVars> {
    let z = g.constant(z);
    let residual = forward_graph(g, params, z)?;
    let z_hat = g.sub(z, residual)?;
    let x_hat = g.exp(z_hat)?;
    // x̂ = exp(ẑ) is strictly positive; no offset needed.
    let log_x_hat = g.log(x_hat, T::zero())?;
    let r = g.sub(z, log_x_hat)?;
    Ok(DespeckleVars { z, residual, z_hat, x_hat, r })
}

/// Despeckled intensity and log-ratio residual of an intensity image.
#[derive(Debug, Clone)]
pub struct Despeckled {
    pub x_hat: Tensor<f32>,
    pub r: Tensor<f32>,
}

/// `z = ln(y + ε)`, `x̂ = exp(z − f(z))`, `r = z − ln x̂`.
pub fn despeckle(params: &RpnParams<f32>, y: &Tensor<f32>, eps: f64) -> Result<Despeckled> {
    let z = speckle::to_log(y, eps)?;
    let f = forward(params, &z)?;
    let z_hat = z.zip_map(&f, |a, b| a - b)?;
    let x_hat = speckle::from_log(&z_hat);
    let r = z.zip_map(&x_hat, |zv, xv| zv - xv.ln())?;
    Ok(Despeckled { x_hat, r })
}

/// Finite-difference check of the whole network in 64-bit precision.
///
/// Every parameter tensor and the input of a `1×1×16×16` log image are probed
/// (at most `entries_per_tensor` entries each) through a random projection of
/// the output. All weights are randomized, including head, biases, norm
/// parameters and layer scales, so that no gradient path is trivially zero.
pub fn network_gradcheck(seed: u64, entries_per_tensor: usize, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = build_rpn(seed)
        .cast::<f64>()
        .into_tensors()
        .into_iter()
        .zip(layout())
        .map(|(t, (name, shape))| {
            if name.ends_with(".weight") && !name.starts_with("head.") {
                t
            } else if name.ends_with("norm.scale") {
                random_tensor(shape, 0.5, 1.5, &mut rng)
            } else if name.ends_with("layer_scale") {
                random_tensor(shape, 0.2, 0.8, &mut rng)
            } else {
                random_tensor(shape, -0.2, 0.2, &mut rng)
            }
        })
        .collect();
    inputs.push(random_tensor([1, 1, 16, 16], -3.0, 0.5, &mut rng));
    let n_params = inputs.len() - 1;
    let dir_seed = rng.random::<u64>();
    let errs = check(&inputs, FD_STEP, Some(entries_per_tensor), dir_seed, |g, v| {
        let out = forward_graph(g, &v[..n_params], v[n_params]).map_err(|e| match e {
            RpnError::Tensor(t) => t,
            other => TensorError::InvalidArgument { op: "rpn_forward", detail: other.to_string() },
        })?;
        Ok(project(g, out, dir_seed)?)
    })?;
    Ok(GradCheckReport {
        name: "rpn_full".into(),
        max_rel_err: errs.into_iter().fold(0.0, f64::max),
        entries_checked: inputs.iter().map(|t| t.len().min(entries_per_tensor)).sum(),
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_exact() {
        let p = build_rpn(0);
        assert_eq!(p.param_count(), PARAM_COUNT);
        let analytic = 864 + 96 + 2 * (4704 + 96 + 96 + 96 + 36864 + 384 + 36864 + 96 + 96) + 864 + 1;
        assert_eq!(analytic, PARAM_COUNT);
        assert_eq!((PARAM_COUNT as f64 / 1e6 * 100.0).round() / 100.0, 0.16);
    }

    #[test]
    fn mac_count_matches_table_figure() {
        assert_eq!(macs(1, 1), 158_592);
        assert_eq!(macs(160, 160), 158_592 * 25_600);
        assert!((macs(160, 160) as f64 / 4.14e9 - 1.0).abs() < 0.05);
        assert_eq!(macs(160, 160), 4 * macs(80, 80));
    }

    #[test]
    fn fresh_network_is_identity() {
        let p = build_rpn(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [64, 160] {
            let z = random_tensor([1, 1, size, size], -2.0, 0.0, &mut rng).cast::<f32>();
            let f = forward(&p, &z).unwrap();
            assert_eq!(f.shape(), z.shape());
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
        let y = random_tensor([1, 1, 32, 32], 0.01, 1.0, &mut rng).cast::<f32>();
        let d = despeckle(&p, &y, 1e-6).unwrap();
        for ((&xh, &yv), &r) in d.x_hat.data().iter().zip(y.data()).zip(d.r.data()) {
            assert!((xh - yv).abs() < 2e-6);
            assert!(r.abs() < 1e-5);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        assert_eq!(build_rpn(7), build_rpn(7));
        assert_ne!(build_rpn(7), build_rpn(8));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = build_rpn(0);
        assert!(matches!(forward(&p, &Tensor::zeros([1, 2, 16, 16])), Err(RpnError::Channels(2))));
        assert!(matches!(forward(&p, &Tensor::zeros([1, 1, 6, 16])), Err(RpnError::TooSmall(_))));
        let mut t = p.into_tensors();
        t.pop();
        assert!(RpnParams::from_tensors(t).is_err());
    }

    #[test]
    fn full_network_passes_finite_difference_check() {
        let report = network_gradcheck(11, 6, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn staged_and_recorded_forward_agree() {
        let mut p = build_rpn(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        *p.head_weight_mut() = random_tensor([1, WIDTH, 3, 3], -0.05, 0.05, &mut rng).cast();
        let z = random_tensor([2, 1, 12, 10], -2.0, 0.0, &mut rng).cast::<f32>();
        let staged = forward(&p, &z).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let zv = g.constant(z);
        let out = forward_graph(&mut g, &vars, zv).unwrap();
        assert_eq!(g.value(out), &staged);
    }

    #[test]
    fn residual_identity_holds_for_trained_like_weights() {
        let mut p = build_rpn(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        *p.head_weight_mut() = random_tensor([1, WIDTH, 3, 3], -0.05, 0.05, &mut rng).cast();
        let y = random_tensor([1, 1, 24, 24], 0.01, 1.0, &mut rng).cast::<f32>();
        let z = speckle::to_log(&y, 1e-6).unwrap();
        let f = forward(&p, &z).unwrap();
        let d = despeckle(&p, &y, 1e-6).unwrap();
        for (a, b) in d.r.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for ((&r, &xh), &yv) in d.r.data().iter().zip(d.x_hat.data()).zip(y.data()) {
            assert!((r.exp() * xh - yv).abs() < 1e-4);
        }
    }
}
