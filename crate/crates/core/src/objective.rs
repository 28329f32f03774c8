//! Self-supervised objective.
//!
//! `total = β(t)·L_med + γ·L_stat + λ·L_str`, where
//!
//! * `L_stat = |E[r]| + |Var(r) − σ²_tgt|` pins the log-ratio residual to the
//!   speckle statistics; the identity despeckler (`r ≡ 0`) pays `σ²_tgt`.
//! * `L_str = Σ exp(−‖∇x̂‖/σ)·|∇r|` asks for a smooth residual except across
//!   edges of the estimate.
//! * `L_med = mean |ẑ − ln(Med(y) + ε)|` is a median-filter prior whose weight
//!   decays linearly to zero over the first `T` epochs.

use thiserror::Error;

use crate::tensor::{Axis, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("median window {window} does not fit a {h}x{w} image")]
    WindowTooLarge { window: usize, h: usize, w: usize },
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// Which samples the moments of `L_stat` are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatScope {
    /// Moments per patch, loss averaged over the batch.
    #[default]
    Patch,
    /// Moments over the whole batch at once.
    Batch,
}

impl std::str::FromStr for StatScope {
    type Err = ObjectiveError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "batch" => Ok(Self::Batch),
            other => Err(ObjectiveError::Config(format!("unknown stat scope '{other}'"))),
        }
    }
}

impl std::fmt::Display for StatScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Patch => "patch",
            Self::Batch => "batch",
        })
    }
}

/// Loss weights and shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Curriculum weight at epoch 0.
    pub beta0: f64,
    /// Curriculum horizon `T` in epochs.
    pub horizon: u32,
    /// Weight `γ` of the statistical term.
    pub gamma: f64,
    /// Weight `λ` of the structural term.
    pub lambda: f64,
    /// Edge sensitivity `σ` of the structural weight.
    pub sigma_edge: f64,
    pub median_window: usize,
    /// Log offset `ε`.
    pub eps: f64,
    pub stat_scope: StatScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            horizon: 30,
            gamma: 1.0,
            lambda: 0.05,
            sigma_edge: 0.1,
            median_window: 3,
            eps: 1e-6,
            stat_scope: StatScope::Patch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ObjectiveError::Config(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if self.median_window < 3 || self.median_window % 2 == 0 {
            return bad("median_window must be odd and >= 3");
        }
        if !(self.beta0 >= 0.0 && self.gamma >= 0.0 && self.lambda >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.sigma_edge > 0.0) {
            return bad("sigma_edge must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Linear curriculum `β(t) = β₀·max(0, 1 − t/T)`.
pub fn beta_schedule(epoch: u32, beta0: f64, horizon: u32) -> f64 {
    if epoch >= horizon {
        return 0.0;
    }
    beta0 * (1.0 - epoch as f64 / horizon as f64)
}

/// Statistical term on residual patches `[n, 1, h, w]`.
pub fn loss_stat<T: Real>(g: &mut Graph<T>, r: Var, sigma2_tgt: f64, scope: StatScope) -> Result<Var> {
    let (mean, var) = match scope {
        StatScope::Patch => (g.sample_mean(r)?, g.sample_var(r)?),
        StatScope::Batch => (g.reduce_mean(r)?, g.reduce_var(r)?),
    };
    let mean_dev = g.abs(mean)?;
    let var_gap = g.add_scalar(var, T::lit(-sigma2_tgt))?;
    let var_dev = g.abs(var_gap)?;
    let per = g.add(mean_dev, var_dev)?;
    Ok(g.reduce_mean(per)?)
}

/// Offset inside the gradient-magnitude square root; keeps its derivative finite on
/// flat pixels. Its square root is subtracted again so flat pixels get magnitude 0.
const GRAD_MAG_OFFSET: f64 = 1e-12;

/// Edge-aware residual smoothness.
///
/// Horizontal and vertical forward differences of `r` are weighted by
/// `exp(−‖∇x̂‖/σ)`, where `‖∇x̂‖` is evaluated at the left/top pixel of each
/// difference with the missing neighbour difference at the last row/column
/// taken as zero. The weighted sum is divided by the number of differences,
/// `h(w−1) + (h−1)w` per plane.
pub fn loss_str<T: Real>(g: &mut Graph<T>, r: Var, x_hat: Var, sigma_edge: f64) -> Result<Var> {
    let s = g.shape(r);
    if s != g.shape(x_hat) {
        return Err(TensorError::ShapeMismatch { op: "loss_str", detail: format!("{} vs {}", s, g.shape(x_hat)) }.into());
    }
    let dx = g.forward_diff(x_hat, Axis::Horizontal)?;
    let dx = g.pad_end(dx, Axis::Horizontal)?;
    let dy = g.forward_diff(x_hat, Axis::Vertical)?;
    let dy = g.pad_end(dy, Axis::Vertical)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let sq = g.add(dx2, dy2)?;
    let mag = g.sqrt_offset(sq, T::lit(GRAD_MAG_OFFSET))?;
    let mag = g.add_scalar(mag, T::lit(-GRAD_MAG_OFFSET.sqrt()))?;
    let arg = g.mul_scalar(mag, T::lit(-1.0 / sigma_edge))?;
    let weight = g.exp(arg)?;

    let mut total = None;
    for (axis, (h, w)) in [(Axis::Horizontal, (s.h, s.w - 1)), (Axis::Vertical, (s.h - 1, s.w))] {
        let dr = g.forward_diff(r, axis)?;
        let adr = g.abs(dr)?;
        let wgt = g.crop(weight, h, w)?;
        let term = g.mul(wgt, adr)?;
        let sum = g.reduce_sum(term)?;
        total = Some(match total {
            None => sum,
            Some(t) => g.add(t, sum)?,
        });
    }
    let count = s.n * s.c * (s.h * (s.w - 1) + (s.h - 1) * s.w);
    Ok(g.mul_scalar(total.expect("two axes"), T::lit(1.0 / count as f64))?)
}

/// Spatial median filter with reflected borders, per plane.
pub fn median_filter(y: &Tensor<f32>, window: usize) -> Result<Tensor<f32>> {
    let s = y.shape();
    let p = window / 2;
    if window % 2 == 0 || window > s.h || window > s.w {
        return Err(ObjectiveError::WindowTooLarge { window, h: s.h, w: s.w });
    }
    let mut out = Vec::with_capacity(s.len());
    let mut buf = Vec::with_capacity(window * window);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 { -i } else { i };
        (if j >= n { 2 * n - 2 - j } else { j }) as usize
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = y.plane(n, c);
            for yy in 0..s.h {
                for xx in 0..s.w {
                    buf.clear();
                    for dy in -(p as isize)..=p as isize {
                        let sy = reflect(yy as isize + dy, s.h);
                        for dx in -(p as isize)..=p as isize {
                            buf.push(plane[sy * s.w + reflect(xx as isize + dx, s.w)]);
                        }
                    }
                    let mid = buf.len() / 2;
                    let (_, m, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
                    out.push(*m);
                }
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

/// Curriculum target `ln(Med(y) + ε)`.
pub fn median_target(y: &Tensor<f32>, window: usize, eps: f64) -> Result<Tensor<f32>> {
    Ok(median_filter(y, window)?.map(|m| ((m as f64) + eps).ln() as f32))
}

/// Curriculum prior against a precomputed target; the target is a constant of the graph.
pub fn loss_med<T: Real>(g: &mut Graph<T>, z_hat: Var, target: Tensor<T>) -> Result<Var> {
    let t = g.constant(target);
    let d = g.sub(z_hat, t)?;
    let a = g.abs(d)?;
    Ok(g.reduce_mean(a)?)
}

/// Scalar values of the three terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_med: f64,
    pub l_stat: f64,
    pub l_str: f64,
    pub beta_t: f64,
    pub total: f64,
}

/// Graph nodes the objective is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub z_hat: Var,
    pub x_hat: Var,
    pub r: Var,
}

/// Records the full objective at epoch `epoch`; the returned node is the backward root.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    inputs: LossInputs,
    median_target: Tensor<T>,
    config: &LossConfig,
    sigma2_tgt: f64,
    epoch: u32,
) -> Result<(Var, LossBreakdown)> {
    let beta_t = beta_schedule(epoch, config.beta0, config.horizon);
    let l_med = loss_med(g, inputs.z_hat, median_target)?;
    let l_stat = loss_stat(g, inputs.r, sigma2_tgt, config.stat_scope)?;
    let l_str = loss_str(g, inputs.r, inputs.x_hat, config.sigma_edge)?;
    let a = g.mul_scalar(l_med, T::lit(beta_t))?;
    let b = g.mul_scalar(l_stat, T::lit(config.gamma))?;
    let c = g.mul_scalar(l_str, T::lit(config.lambda))?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown { l_med: val(l_med), l_stat: val(l_stat), l_str: val(l_str), beta_t, total: val(total) };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar<T: Real>(t: &Tensor<T>) -> f64 {
        t.item().to_f64().unwrap()
    }

    fn stat(r: Tensor<f64>, tgt: f64, scope: StatScope) -> f64 {
        let mut g = Graph::new();
        let rv = g.constant(r);
        let l = loss_stat(&mut g, rv, tgt, scope).unwrap();
        scalar(g.value(l))
    }

    fn structural(r: Tensor<f64>, x: Tensor<f64>, sigma: f64) -> f64 {
        let mut g = Graph::new();
        let rv = g.constant(r);
        let xv = g.constant(x);
        let l = loss_str(&mut g, rv, xv, sigma).unwrap();
        scalar(g.value(l))
    }

    #[test]
    fn stat_loss_cases() {
        assert!((stat(Tensor::zeros([1, 1, 4, 4]), 0.1175, StatScope::Patch) - 0.1175).abs() < 1e-15);
        let r = Tensor::new([1, 1, 2, 2], vec![0.1, -0.1, 0.2, -0.2]).unwrap();
        assert!((stat(r.clone(), 0.1175, StatScope::Patch) - 0.0925).abs() < 1e-12);
        // Zero-mean ±a with a² = σ²: both moments on target.
        let a = 0.1175f64.sqrt();
        let r = Tensor::new([1, 1, 2, 2], vec![a, -a, -a, a]).unwrap();
        assert!(stat(r, 0.1175, StatScope::Patch) < 1e-15);
    }

    #[test]
    fn stat_loss_scopes_differ_on_heterogeneous_batches() {
        // Two patches with opposite means cancel in batch scope only.
        let r = Tensor::new([2, 1, 1, 2], vec![0.5, 0.5, -0.5, -0.5]).unwrap();
        let patch = stat(r.clone(), 0.25, StatScope::Patch);
        let batch = stat(r, 0.25, StatScope::Batch);
        assert!((patch - (0.5 + 0.25)).abs() < 1e-12);
        assert!(batch.abs() < 1e-12);
    }

    #[test]
    fn structural_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([1, 1, 6, 6], 0.1, 1.0, &mut rng);
        assert_eq!(structural(Tensor::full([1, 1, 6, 6], 0.3), x, 0.1), 0.0);

        // Horizontal unit step after column 1 of a 4×4 residual, flat x̂.
        let step = Tensor::from_fn([1, 1, 4, 4], |[_, _, _, j]| if j >= 2 { 1.0 } else { 0.0 });
        let flat = Tensor::full([1, 1, 4, 4], 0.5);
        let v = structural(step.clone(), flat, 0.1);
        assert!((v - 1.0 / 6.0).abs() < 1e-12, "{v}");

        // Same step sitting on a strong edge of x̂: the weight collapses.
        let edge = Tensor::from_fn([1, 1, 4, 4], |[_, _, _, j]| if j >= 2 { 1.0 } else { 0.1 });
        let e = structural(step, edge, 0.1);
        assert!(e < 1e-3 * v, "{e}");
    }

    #[test]
    fn median_filter_and_prior() {
        let y = Tensor::new([1, 1, 3, 3], vec![1.0f32, 2.0, 3.0, 4.0, 100.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        assert_eq!(median_filter(&y, 3).unwrap().get(0, 0, 1, 1), 6.0);
        assert!(median_filter(&y, 5).is_err());

        let c = Tensor::full([1, 1, 8, 8], 0.4f32);
        let m = median_filter(&c, 3).unwrap();
        assert_eq!(m, c);
        let target = median_target(&c, 3, 1e-6).unwrap();
        let mut g = Graph::<f32>::new();
        let zh = g.constant(Tensor::full([1, 1, 8, 8], -1.0));
        let l = loss_med(&mut g, zh, target.clone()).unwrap();
        let expected = (-1.0 - (0.4f64 + 1e-6).ln()).abs();
        assert!((scalar(g.value(l)) - expected).abs() < 1e-6);
        let zh = g.constant(target.clone());
        let l = loss_med(&mut g, zh, target).unwrap();
        assert_eq!(scalar(g.value(l)), 0.0);
    }

    #[test]
    fn curriculum_schedule() {
        assert_eq!(beta_schedule(0, 1.0, 30), 1.0);
        assert_eq!(beta_schedule(15, 1.0, 30), 0.5);
        assert_eq!(beta_schedule(30, 1.0, 30), 0.0);
        assert_eq!(beta_schedule(31, 1.0, 30), 0.0);
        assert_eq!(beta_schedule(10, 2.0, 40), 1.5);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { horizon: 0, ..Default::default() },
            LossConfig { median_window: 4, ..Default::default() },
            LossConfig { median_window: 1, ..Default::default() },
            LossConfig { lambda: -1.0, ..Default::default() },
            LossConfig { sigma_edge: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn total(cfg: &LossConfig, r: Tensor<f64>, x_hat: Tensor<f64>, z_hat: Tensor<f64>, target: Tensor<f64>, tgt: f64, epoch: u32) -> LossBreakdown {
        let mut g = Graph::new();
        let inputs = LossInputs { z_hat: g.constant(z_hat), x_hat: g.constant(x_hat), r: g.constant(r) };
        loss_total(&mut g, inputs, target, cfg, tgt, epoch).unwrap().1
    }

    #[test]
    fn total_weights_isolate_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sh = [2, 1, 6, 6];
        let (r, x, zh, t) = (
            random_tensor(sh, -0.5, 0.5, &mut rng),
            random_tensor(sh, 0.1, 1.0, &mut rng),
            random_tensor(sh, -2.0, 0.0, &mut rng),
            random_tensor(sh, -2.0, 0.0, &mut rng),
        );
        let only_med = LossConfig { gamma: 0.0, lambda: 0.0, ..Default::default() };
        let b = total(&only_med, r.clone(), x.clone(), zh.clone(), t.clone(), 0.2, 0);
        assert!((b.total - b.l_med).abs() < 1e-12);

        let cfg = LossConfig { gamma: 0.7, lambda: 0.3, ..Default::default() };
        let b = total(&cfg, r, x, zh, t, 0.2, 6);
        let recombined = b.beta_t * b.l_med + 0.7 * b.l_stat + 0.3 * b.l_str;
        assert!((b.total - recombined).abs() < 1e-7);
        assert!((b.beta_t - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_mapping_pays_target_variance() {
        let sigma2 = 0.2838;
        let x = Tensor::full([1, 1, 8, 8], 0.5);
        let cfg = LossConfig { gamma: 1.3, ..Default::default() };
        let zeros = Tensor::zeros([1, 1, 8, 8]);
        let b = total(&cfg, zeros.clone(), x.clone(), zeros.clone(), zeros, sigma2, 30);
        assert!((b.total - 1.3 * sigma2).abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn stat_loss_ignores_sign_of_zero_mean_residual(seed in 0u64..10_000, tgt in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random_tensor([2, 1, 5, 6], -1.0, 1.0, &mut rng);
            let centred = raw.map(|v| v - raw.mean());
            let flipped = centred.map(|v| -v);
            for scope in [StatScope::Patch, StatScope::Batch] {
                let a = stat(centred.clone(), tgt, scope);
                let b = stat(flipped.clone(), tgt, scope);
                proptest::prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0), "{a} vs {b}");
            }
        }

        #[test]
        fn structural_loss_is_non_negative_and_vanishes_only_on_flat_residuals(
            seed in 0u64..10_000,
            flat in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor([1, 1, 6, 7], 0.05, 1.0, &mut rng);
            let r = if flat { Tensor::full([1, 1, 6, 7], 0.4) } else { random_tensor([1, 1, 6, 7], -1.0, 1.0, &mut rng) };
            let v = structural(r, x, 0.1);
            proptest::prop_assert!(v >= 0.0);
            proptest::prop_assert_eq!(v == 0.0, flat);
        }

        #[test]
        fn losses_and_gradients_are_finite(seed in 0u64..10_000, scale in 0.01f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sh = [2, 1, 6, 6];
            let r = random_tensor(sh, -scale, scale, &mut rng);
            let x = random_tensor(sh, 1e-6, scale, &mut rng);
            let zh = random_tensor(sh, -scale, scale, &mut rng);
            let target = random_tensor(sh, -scale, scale, &mut rng);
            let mut g = Graph::new();
            let (rv, xv, zv) = (g.leaf(r, true), g.leaf(x, true), g.leaf(zh, true));
            let inputs = LossInputs { z_hat: zv, x_hat: xv, r: rv };
            let (root, b) = loss_total(&mut g, inputs, target, &LossConfig::default(), 0.2838, 3).unwrap();
            proptest::prop_assert!(b.l_med.is_finite() && b.l_stat.is_finite() && b.l_str.is_finite());
            g.backward(root).unwrap();
            for v in [rv, xv, zv] {
                proptest::prop_assert!(g.grad(v).unwrap().is_finite());
            }
        }
    }
}
