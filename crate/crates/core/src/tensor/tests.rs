use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, random_tensor};
use super::*;

fn run<T: Real>(inputs: &[Tensor<T>], f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>) -> Tensor<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

fn delta_kernel(co: usize, ci: usize, k: usize, depthwise: bool) -> Tensor<f64> {
    let c = if depthwise { 1 } else { ci };
    Tensor::from_fn([co, c, k, k], |[o, i, y, x]| {
        let on_diag = depthwise || o == i;
        if on_diag && y == k / 2 && x == k / 2 {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor([2, 1, 6, 5], 0.0, 1.0, &mut rng);
    let out = run(&[x.clone(), delta_kernel(1, 1, 3, false), Tensor::zeros([1, 1, 1, 1])], |g, v| {
        g.conv2d(v[0], v[1], v[2], Padding::Reflect)
    });
    assert_eq!(out, x);
}

#[test]
fn conv2d_constant_image_with_ones_kernel_gives_nine_v() {
    let x = Tensor::full([1, 1, 6, 6], 0.25f64);
    let k = Tensor::full([1, 1, 3, 3], 1.0);
    let out = run(&[x, k, Tensor::zeros([1, 1, 1, 1])], |g, v| g.conv2d(v[0], v[1], v[2], Padding::Reflect));
    assert!(out.data().iter().all(|&v| (v - 2.25).abs() < 1e-12));
}

#[test]
fn conv2d_rejects_even_kernel_and_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([1, 1, 6, 6]), false);
    let k = g.leaf(Tensor::zeros([1, 1, 4, 4]), false);
    let b = g.leaf(Tensor::zeros([1, 1, 1, 1]), false);
    assert!(matches!(g.conv2d(x, k, b, Padding::Reflect), Err(TensorError::EvenKernel { k: 4, .. })));
    let k2 = g.leaf(Tensor::zeros([1, 2, 3, 3]), false);
    assert!(matches!(g.conv2d(x, k2, b, Padding::Reflect), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn depthwise_delta_is_identity_and_channels_are_separated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor([1, 3, 9, 8], -1.0, 1.0, &mut rng);
    let out = run(&[x.clone(), delta_kernel(3, 3, 7, true), Tensor::zeros([3, 1, 1, 1])], |g, v| {
        g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect)
    });
    assert_eq!(out, x);

    // Channel 0 all zero: output channel 0 is the bias whatever the kernel.
    let mut x = random_tensor([1, 2, 8, 8], -1.0, 1.0, &mut rng);
    x.data_mut()[..64].fill(0.0);
    let k = random_tensor([2, 1, 7, 7], -1.0, 1.0, &mut rng);
    let b = Tensor::vector(vec![0.7, -0.3]);
    let out = run(&[x, k, b], |g, v| g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect));
    assert!(out.plane(0, 0).iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::zeros([1, 2, 8, 8]), false);
    let kv = g.leaf(Tensor::zeros([3, 1, 7, 7]), false);
    let bv = g.leaf(Tensor::zeros([3, 1, 1, 1]), false);
    assert!(g.depthwise_conv2d(xv, kv, bv, Padding::Reflect).is_err());
}

#[test]
fn pointwise_identity_and_channel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor([2, 3, 4, 5], -1.0, 1.0, &mut rng);
    let eye = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
    let out = run(&[x.clone(), eye, Tensor::zeros([3, 1, 1, 1])], |g, v| g.pointwise_conv(v[0], v[1], v[2]));
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let x = random_tensor([1, 2, 3, 3], -1.0, 1.0, &mut rng);
    let w = Tensor::full([1, 2, 1, 1], 1.0);
    let out = run(&[x.clone(), w, Tensor::zeros([1, 1, 1, 1])], |g, v| g.pointwise_conv(v[0], v[1], v[2]));
    for i in 0..9 {
        assert!((out.data()[i] - (x.data()[i] + x.data()[9 + i])).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_fixed_points() {
    // Channel vector (1, -1, 1, -1) is already zero-mean, unit-variance.
    let x = Tensor::from_fn([1, 4, 1, 1], |[_, c, _, _]| if c % 2 == 0 { 1.0 } else { -1.0 });
    let ones = Tensor::full([4, 1, 1, 1], 1.0);
    let zeros = Tensor::zeros([4, 1, 1, 1]);
    let out = run(&[x.clone(), ones.clone(), zeros], |g, v| g.layer_norm_channels(v[0], v[1], v[2], 1e-6));
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }

    let x = Tensor::full([1, 4, 2, 2], 3.0);
    let shift = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
    let out = run(&[x, ones, shift], |g, v| g.layer_norm_channels(v[0], v[1], v[2], 1e-6));
    for c in 0..4 {
        assert!(out.plane(0, c).iter().all(|&v| (v - 0.1 * (c + 1) as f64).abs() < 1e-12));
    }
}

#[test]
fn gelu_values_and_slope() {
    let x = Tensor::vector(vec![0.0, 10.0, 0.5]);
    let out = run(&[x], |g, v| g.gelu(v[0]));
    assert_eq!(out.data()[0], 0.0);
    assert!((out.data()[1] - 10.0).abs() < 1e-6);

    let f = |x: f64| run(&[Tensor::scalar(x)], |g, v| g.gelu(v[0])).item();
    let fd = (f(0.5 + 1e-5) - f(0.5 - 1e-5)) / 2e-5;
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::scalar(0.5f64), true);
    let y = g.gelu(xv).unwrap();
    g.backward(y).unwrap();
    assert!((g.grad(xv).unwrap().item() - fd).abs() < 1e-6);
}

#[test]
fn elementwise_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_tensor([1, 1, 5, 5], 0.01, 1.0, &mut rng);
    let back = run(&[y.clone()], |g, v| {
        let l = g.log(v[0], 0.0)?;
        g.exp(l)
    });
    for (a, b) in back.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-6);
    }

    let flat = Tensor::full([1, 1, 4, 4], 0.3f64);
    let d = run(&[flat], |g, v| g.forward_diff(v[0], Axis::Horizontal));
    assert!(d.data().iter().all(|&v| v == 0.0));

    let row = Tensor::new([1, 1, 1, 3], vec![1.0f64, 3.0, 6.0]).unwrap();
    let d = run(&[row], |g, v| g.forward_diff(v[0], Axis::Horizontal));
    assert_eq!(d.data(), &[2.0, 3.0]);
    assert_eq!(d.shape(), Shape::new(1, 1, 1, 2));

    let col = Tensor::new([1, 1, 3, 1], vec![1.0f64, 3.0, 6.0]).unwrap();
    let d = run(&[col], |g, v| g.forward_diff(v[0], Axis::Vertical));
    assert_eq!(d.data(), &[2.0, 3.0]);
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::vector(vec![0.5, -0.1]), false);
    assert!(matches!(g.log(x, 1e-6), Err(TensorError::NonPositiveLog { .. })));
    let z = g.leaf(Tensor::vector(vec![0.0]), false);
    assert!(g.log(z, 0.0).is_err());
}

#[test]
fn reductions_match_hand_values() {
    let x = Tensor::vector(vec![0.1f64, -0.1, 0.2, -0.2]);
    let m = run(&[x.clone()], |g, v| g.reduce_mean(v[0])).item();
    let var = run(&[x], |g, v| g.reduce_var(v[0])).item();
    assert!(m.abs() < 1e-15);
    assert!((var - 0.025).abs() < 1e-15);
    let c = run(&[Tensor::full([1, 1, 3, 3], 2.5f64)], |g, v| g.reduce_var(v[0])).item();
    assert_eq!(c, 0.0);

    let mut g = Graph::<f64>::new();
    let e = g.leaf(Tensor::zeros([0, 1, 1, 1]), false);
    assert!(matches!(g.reduce_mean(e), Err(TensorError::Empty { .. })));
    assert!(matches!(g.reduce_var(e), Err(TensorError::Empty { .. })));
}

#[test]
fn backward_of_mean_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor([1, 2, 3, 3], -1.0, 1.0, &mut rng);
    let n = x.len() as f64;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let m = g.reduce_mean(xv).unwrap();
    g.backward(m).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-15));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let m = g.reduce_mean(sq).unwrap();
    g.backward(m).unwrap();
    for (gv, xv) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv / n).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    let s = g.reduce_sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(TensorError::TapeConsumed));
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 2.0, -3.0]), true);
    let a = g.abs(x).unwrap();
    let s = g.reduce_sum(a).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, -1.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::vector(vec![100.0]), false);
    assert!(matches!(g.exp(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn every_op_passes_finite_difference_check() {
    let reports = gradcheck::op_suite(11, 20, 1e-4).unwrap();
    for r in &reports {
        assert!(r.passed(), "{}: max rel err {:.3e}", r.name, r.max_rel_err);
    }
}

#[test]
fn depthwise_channel_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor([1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let k = random_tensor([3, 1, 7, 7], -1.0, 1.0, &mut rng);
    let b = Tensor::zeros([3, 1, 1, 1]);
    let base = run(&[x.clone(), k.clone(), b.clone()], |g, v| g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect));
    let mut x2 = x;
    for v in &mut x2.data_mut()[64..128] {
        *v += 0.5;
    }
    let moved = run(&[x2, k, b], |g, v| g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect));
    assert_eq!(base.plane(0, 0), moved.plane(0, 0));
    assert_eq!(base.plane(0, 2), moved.plane(0, 2));
    assert_ne!(base.plane(0, 1), moved.plane(0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convolutions_are_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let y = random_tensor([1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let k3 = random_tensor([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let k7 = random_tensor([2, 1, 7, 7], -1.0, 1.0, &mut rng);
        let w = random_tensor([3, 2, 1, 1], -1.0, 1.0, &mut rng);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let ops: [fn(&mut Graph<f64>, Var, &[Tensor<f64>; 3]) -> Result<Var>; 3] = [
            |g, x, p| { let k = g.constant(p[0].clone()); let b = g.constant(Tensor::zeros([3, 1, 1, 1])); g.conv2d(x, k, b, Padding::Reflect) },
            |g, x, p| { let k = g.constant(p[1].clone()); let b = g.constant(Tensor::zeros([2, 1, 1, 1])); g.depthwise_conv2d(x, k, b, Padding::Reflect) },
            |g, x, p| { let k = g.constant(p[2].clone()); let b = g.constant(Tensor::zeros([3, 1, 1, 1])); g.pointwise_conv(x, k, b) },
        ];
        let params = [k3, k7, w];
        for op in ops {
            let fx = run(&[x.clone()], |g, v| op(g, v[0], &params));
            let fy = run(&[y.clone()], |g, v| op(g, v[0], &params));
            let fc = run(&[combo.clone()], |g, v| op(g, v[0], &params));
            for ((c, p), q) in fc.data().iter().zip(fx.data()).zip(fy.data()) {
                prop_assert!((c - (a * p + b * q)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn variance_equals_second_moment_minus_squared_mean(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([1, 2, 4, 5], -3.0, 3.0, &mut rng);
        let var = run(&[x.clone()], |g, v| g.reduce_var(v[0])).item();
        let m = run(&[x.clone()], |g, v| g.reduce_mean(v[0])).item();
        let m2 = run(&[x], |g, v| { let s = g.mul(v[0], v[0])?; g.reduce_mean(s) }).item();
        prop_assert!((var - (m2 - m * m)).abs() < 1e-10);
    }
}

#[test]
fn fast_erf_matches_reference() {
    let mut worst = 0.0f64;
    for i in -60_000..=60_000 {
        let x = i as f64 * 1e-4;
        let got = super::erf_f32(x as f32) as f64;
        worst = worst.max((got - libm::erf(x)).abs());
    }
    assert!(worst < 5e-7, "{worst}");
    assert_eq!(super::erf_f32(0.0), 0.0);
    assert!((super::erf_f32(10.0) - 1.0).abs() <= f32::EPSILON);
    assert!((super::erf_f32(-10.0) + 1.0).abs() <= f32::EPSILON);
}

#[test]
fn fast_exp_matches_reference() {
    let mut worst = 0.0f64;
    for i in -87_000..=88_000 {
        let x = i as f64 * 1e-3;
        let got = super::exp_f32(x as f32) as f64;
        let want = (x as f32 as f64).exp();
        worst = worst.max((got - want).abs() / want);
    }
    assert!(worst < 3e-7, "{worst}");
    assert_eq!(super::exp_f32(0.0), 1.0);
}
