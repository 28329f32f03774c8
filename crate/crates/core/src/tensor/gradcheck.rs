//! Central finite-difference checks of tape gradients.
//!
//! The checker only ever evaluates the forward pass, so it is an independent
//! oracle for every backward rule in [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Axis, Graph, Padding, Result, Shape, Tensor, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator guard in `|g_auto - g_fd| / (|g_fd| + GUARD)`.
pub const REL_GUARD: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares tape gradients of the scalar built by `f` against central differences.
///
/// `f` receives a fresh graph and one leaf per input (all requiring gradients)
/// and must return a scalar node. When `max_entries` is set, at most that many
/// entries per input are probed: the largest-magnitude gradients first, then
/// a seeded random sample.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, max_entries: Option<usize>, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let auto = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let idx = probe_indices(auto.data(), max_entries, &mut rng);
        let mut max_err: f64 = 0.0;
        for j in idx {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (auto.data()[j] - fd).abs() / (fd.abs() + REL_GUARD);
            max_err = max_err.max(err);
        }
        worst.push(max_err);
    }
    Ok(worst)
}

fn probe_indices(grad: &[f64], max_entries: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    let n = grad.len();
    let Some(limit) = max_entries.filter(|&m| m < n) else {
        return (0..n).collect();
    };
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut chosen: Vec<usize> = by_mag[..limit / 2].to_vec();
    while chosen.len() < limit {
        let j = rng.random_range(0..n);
        if !chosen.contains(&j) {
            chosen.push(j);
        }
    }
    chosen
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let shape = shape.into();
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// `Σ out ⊙ direction` for a fixed random direction, turning any output into a scalar.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_tensor(g.shape(out), -1.0, 1.0, &mut rng);
    let d = g.constant(dir);
    let prod = g.mul(out, d)?;
    g.reduce_sum(prod)
}

type OpCase = (&'static str, Vec<Shape>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", vec![Shape::new(1, 1, 5, 5), Shape::new(2, 1, 3, 3), Shape::new(2, 1, 1, 1)], |g, v| {
            g.conv2d(v[0], v[1], v[2], Padding::Reflect)
        }),
        ("conv2d_zero_pad", vec![Shape::new(2, 2, 5, 4), Shape::new(3, 2, 3, 3), Shape::new(3, 1, 1, 1)], |g, v| {
            g.conv2d(v[0], v[1], v[2], Padding::Zero)
        }),
        (
            "depthwise_conv7",
            vec![Shape::new(1, 2, 8, 9), Shape::new(2, 1, 7, 7), Shape::new(2, 1, 1, 1)],
            |g, v| g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect),
        ),
        ("pointwise_conv", vec![Shape::new(1, 3, 4, 4), Shape::new(2, 3, 1, 1), Shape::new(2, 1, 1, 1)], |g, v| {
            g.pointwise_conv(v[0], v[1], v[2])
        }),
        (
            "layer_norm_channels",
            vec![Shape::new(1, 4, 2, 2), Shape::new(4, 1, 1, 1), Shape::new(4, 1, 1, 1)],
            |g, v| g.layer_norm_channels(v[0], v[1], v[2], 1e-6),
        ),
        ("gelu", vec![Shape::new(1, 2, 3, 3)], |g, v| g.gelu(v[0])),
        ("add", vec![Shape::new(1, 2, 3, 3), Shape::new(1, 2, 3, 3)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![Shape::new(1, 2, 3, 3), Shape::new(1, 2, 3, 3)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![Shape::new(1, 2, 3, 3), Shape::new(1, 2, 3, 3)], |g, v| g.mul(v[0], v[1])),
        ("scale_by_channel", vec![Shape::new(2, 3, 2, 2), Shape::new(3, 1, 1, 1)], |g, v| {
            g.scale_by_channel(v[0], v[1])
        }),
        ("exp_map", vec![Shape::new(1, 1, 4, 4)], |g, v| g.exp(v[0])),
        ("log_map", vec![Shape::new(1, 1, 4, 4)], |g, v| {
            // shift into the positive domain
            let pos = g.exp(v[0])?;
            g.log(pos, 1e-6)
        }),
        ("abs_map", vec![Shape::new(1, 1, 4, 4)], |g, v| g.abs(v[0])),
        ("sqrt_offset", vec![Shape::new(1, 1, 4, 4)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sqrt_offset(sq, 1e-3)
        }),
        ("forward_diff_h", vec![Shape::new(1, 2, 3, 4)], |g, v| g.forward_diff(v[0], Axis::Horizontal)),
        ("forward_diff_v", vec![Shape::new(1, 2, 3, 4)], |g, v| g.forward_diff(v[0], Axis::Vertical)),
        ("pad_end_crop", vec![Shape::new(1, 1, 3, 4)], |g, v| {
            let p = g.pad_end(v[0], Axis::Vertical)?;
            let p = g.pad_end(p, Axis::Horizontal)?;
            g.crop(p, 3, 3)
        }),
        ("reduce_mean", vec![Shape::new(1, 1, 4, 4)], |g, v| g.reduce_mean(v[0])),
        ("reduce_var", vec![Shape::new(1, 1, 4, 4)], |g, v| g.reduce_var(v[0])),
        ("sample_mean", vec![Shape::new(3, 1, 3, 3)], |g, v| g.sample_mean(v[0])),
        ("sample_var", vec![Shape::new(3, 1, 3, 3)], |g, v| g.sample_var(v[0])),
    ]
}

/// Runs every differentiable op on `instances` random small inputs (64-bit),
/// returning one report per op with the worst error across instances.
pub fn op_suite(seed: u64, instances: usize, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for inst in 0..instances {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| random_tensor(s, -1.5, 1.5, &mut rng)).collect();
            entries += inputs.iter().map(Tensor::len).sum::<usize>();
            let dir_seed = rng.random::<u64>() ^ inst as u64;
            let errs = check(&inputs, FD_STEP, None, dir_seed, |g, v| {
                let out = f(g, v)?;
                if g.shape(out).len() == 1 {
                    Ok(out)
                } else {
                    project(g, out, dir_seed)
                }
            })?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        reports.push(GradCheckReport { name: name.to_string(), max_rel_err: worst, entries_checked: entries, tolerance });
    }
    Ok(reports)
}
