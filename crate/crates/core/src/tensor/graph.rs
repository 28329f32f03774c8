//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward rule needs. Nodes are created in evaluation order, so the node
//! vector is already topologically sorted and [`Graph::backward`] is a single
//! reverse sweep.

use super::kernels::{self, ConvGeom, Padding};
use super::{ensure_finite, Real, Result, Shape, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Direction of a forward difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along the width: `x[.., j + 1] - x[.., j]`.
    Horizontal,
    /// Along the height: `x[i + 1, ..] - x[i, ..]`.
    Vertical,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Pointwise { x: Var, weight: Var, bias: Var, co: usize },
    LayerNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleChannels { x: Var, scale: Var },
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var, T),
    Abs(Var),
    SqrtOffset(Var),
    ForwardDiff(Var, Axis),
    PadEnd(Var, Axis),
    Crop(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    ReduceVar(Var),
    SampleMean(Var),
    SampleVar(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation that can be differentiated once.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are kept only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape tracks value shape"))
    }

    fn push(&mut self, op: &'static str, shape: Shape, data: Vec<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op: kind, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, kind: Op<T>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let data = xv.data().iter().map(|&v| f(v)).collect();
        self.push(op, shape, data, kind, &[x])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, kind: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, format!("{} vs {}", av.shape(), bv.shape())));
        }
        let shape = av.shape();
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, shape, data, kind, &[a, b])
    }

    fn expect_len(&self, op: &'static str, what: &str, v: Var, len: usize) -> Result<()> {
        let got = self.value(v).len();
        if got != len {
            return Err(mismatch(op, format!("{what} has {got} values, expected {len}")));
        }
        Ok(())
    }

    fn conv(&mut self, op: &'static str, x: Var, kernel: Var, bias: Var, padding: Padding, depthwise: bool) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if ks.h != ks.w {
            return Err(mismatch(op, format!("kernel {ks} is not square")));
        }
        if ks.h % 2 == 0 {
            return Err(TensorError::EvenKernel { op, k: ks.h });
        }
        let expected_ci = if depthwise { 1 } else { xs.c };
        if ks.c != expected_ci || (depthwise && ks.n != xs.c) {
            return Err(mismatch(op, format!("kernel {ks} incompatible with input {xs}")));
        }
        let p = ks.h / 2;
        if xs.h <= p || xs.w <= p {
            return Err(mismatch(op, format!("input {xs} smaller than kernel support {}", ks.h)));
        }
        self.expect_len(op, "bias", bias, ks.n)?;
        let geom = ConvGeom { shape: xs, co: ks.n, k: ks.h, depthwise, padding };
        let data = kernels::conv_forward(&geom, self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let shape = Shape::new(xs.n, ks.n, xs.h, xs.w);
        self.push(op, shape, data, Op::Conv { x, kernel, bias, geom }, &[x, kernel, bias])
    }

    /// Same-size stride-1 cross-correlation, `kernel` of shape `[co, ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        self.conv("conv2d", x, kernel, bias, padding, false)
    }

    /// Per-channel spatial convolution, `kernel` of shape `[c, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        self.conv("depthwise_conv2d", x, kernel, bias, padding, true)
    }

    /// 1×1 convolution, `weight` of shape `[co, ci, 1, 1]`.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(mismatch("pointwise_conv", format!("weight {ws} incompatible with input {xs}")));
        }
        self.expect_len("pointwise_conv", "bias", bias, ws.n)?;
        let data = kernels::pointwise_forward(xs, ws.n, self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let shape = Shape::new(xs.n, ws.n, xs.h, xs.w);
        self.push("pointwise_conv", shape, data, Op::Pointwise { x, weight, bias, co: ws.n }, &[x, weight, bias])
    }

    /// Normalizes the channel vector at every pixel, then applies a per-channel affine map.
    pub fn layer_norm_channels(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        if xs.c == 0 {
            return Err(TensorError::Empty { op: "layer_norm_channels" });
        }
        if eps <= T::zero() {
            return Err(TensorError::InvalidArgument { op: "layer_norm_channels", detail: "eps must be positive".into() });
        }
        self.expect_len("layer_norm_channels", "scale", scale, xs.c)?;
        self.expect_len("layer_norm_channels", "shift", shift, xs.c)?;
        let (out, xhat, rstd) =
            kernels::layer_norm_forward(xs, self.value(x).data(), self.value(scale).data(), self.value(shift).data(), eps);
        self.push("layer_norm_channels", xs, out, Op::LayerNorm { x, scale, shift, xhat, rstd }, &[x, scale, shift])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| v * normal_cdf(v), Op::Gelu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies channel `c` of every sample by `scale[c]`.
    pub fn scale_by_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(x);
        self.expect_len("scale_by_channel", "scale", scale, xs.c)?;
        let s = self.value(scale).data();
        let plane = xs.plane();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[(i / plane) % xs.c])
            .collect();
        self.push("scale_by_channel", xs, data, Op::ScaleChannels { x, scale }, &[x, scale])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp_map", x, |v| v.exp(), Op::Exp(x))
    }

    /// `ln(x + eps)`; every argument must be strictly positive.
    pub fn log(&mut self, x: Var, eps: T) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v + eps <= T::zero()) {
            return Err(TensorError::NonPositiveLog { value: bad.to_f64().unwrap_or(f64::NAN) });
        }
        self.unary("log_map", x, |v| (v + eps).ln(), Op::Log(x, eps))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs_map", x, |v| v.abs(), Op::Abs(x))
    }

    /// `sqrt(x + offset)`, with `offset > 0` keeping the derivative finite at 0.
    pub fn sqrt_offset(&mut self, x: Var, offset: T) -> Result<Var> {
        if offset <= T::zero() {
            return Err(TensorError::InvalidArgument { op: "sqrt_offset", detail: "offset must be positive".into() });
        }
        self.unary("sqrt_offset", x, |v| (v + offset).sqrt(), Op::SqrtOffset(x))
    }

    /// Forward difference; the output is one sample shorter along `axis`.
    pub fn forward_diff(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let (shape, data) = match axis {
            Axis::Horizontal => {
                if s.w < 2 {
                    return Err(mismatch("forward_diff", format!("width of {s} < 2")));
                }
                let out = Shape::new(s.n, s.c, s.h, s.w - 1);
                let data = xv.chunks(s.w).flat_map(|row| row.windows(2).map(|p| p[1] - p[0])).collect();
                (out, data)
            }
            Axis::Vertical => {
                if s.h < 2 {
                    return Err(mismatch("forward_diff", format!("height of {s} < 2")));
                }
                let out = Shape::new(s.n, s.c, s.h - 1, s.w);
                let mut data = Vec::with_capacity(out.len());
                for plane in xv.chunks(s.plane()) {
                    for y in 0..s.h - 1 {
                        let (a, b) = (&plane[y * s.w..(y + 1) * s.w], &plane[(y + 1) * s.w..(y + 2) * s.w]);
                        data.extend(a.iter().zip(b).map(|(&p, &q)| q - p));
                    }
                }
                (out, data)
            }
        };
        self.push("forward_diff", shape, data, Op::ForwardDiff(x, axis), &[x])
    }

    /// Appends one zero column (horizontal) or row (vertical).
    pub fn pad_end(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let (shape, data) = match axis {
            Axis::Horizontal => {
                let out = Shape::new(s.n, s.c, s.h, s.w + 1);
                let mut data = Vec::with_capacity(out.len());
                for row in xv.chunks(s.w.max(1)) {
                    data.extend_from_slice(row);
                    data.push(T::zero());
                }
                (out, data)
            }
            Axis::Vertical => {
                let out = Shape::new(s.n, s.c, s.h + 1, s.w);
                let mut data = Vec::with_capacity(out.len());
                for plane in xv.chunks(s.plane().max(1)) {
                    data.extend_from_slice(plane);
                    data.extend(std::iter::repeat_n(T::zero(), s.w));
                }
                (out, data)
            }
        };
        self.push("pad_end", shape, data, Op::PadEnd(x, axis), &[x])
    }

    /// Keeps the top-left `h×w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h > s.h || w > s.w {
            return Err(mismatch("crop", format!("{h}x{w} exceeds {s}")));
        }
        let xv = self.value(x).data();
        let out = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out.len());
        for plane in xv.chunks(s.plane()) {
            for y in 0..h {
                data.extend_from_slice(&plane[y * s.w..y * s.w + w]);
            }
        }
        self.push("crop", out, data, Op::Crop(x), &[x])
    }

    fn nonempty(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).is_empty() {
            Err(TensorError::Empty { op })
        } else {
            Ok(())
        }
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        self.nonempty("reduce_sum", x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("reduce_sum", Shape::scalar(), vec![s], Op::ReduceSum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        self.nonempty("reduce_mean", x)?;
        let m = mean(self.value(x).data());
        self.push("reduce_mean", Shape::scalar(), vec![m], Op::ReduceMean(x), &[x])
    }

    /// Population variance over all elements.
    pub fn reduce_var(&mut self, x: Var) -> Result<Var> {
        self.nonempty("reduce_var", x)?;
        let v = variance(self.value(x).data());
        self.push("reduce_var", Shape::scalar(), vec![v], Op::ReduceVar(x), &[x])
    }

    /// Mean over `(c, h, w)` of each sample; shape `[n, 1, 1, 1]`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        self.nonempty("sample_mean", x)?;
        let s = self.shape(x);
        let data = (0..s.n).map(|n| mean(self.value(x).sample(n))).collect();
        self.push("sample_mean", Shape::new(s.n, 1, 1, 1), data, Op::SampleMean(x), &[x])
    }

    /// Population variance over `(c, h, w)` of each sample; shape `[n, 1, 1, 1]`.
    pub fn sample_var(&mut self, x: Var) -> Result<Var> {
        self.nonempty("sample_var", x)?;
        let s = self.shape(x);
        let data = (0..s.n).map(|n| variance(self.value(x).sample(n))).collect();
        self.push("sample_var", Shape::new(s.n, 1, 1, 1), data, Op::SampleVar(x), &[x])
    }

    /// Populates gradients of `loss` with respect to every reachable leaf that requires them.
    ///
    /// A graph can be differentiated once; record a fresh graph for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: Vec<T>) {
        let Self { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let node = &nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, kernel, bias, geom } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let want = [wants(x), wants(kernel), wants(bias)];
                let cg = kernels::conv_backward(geom, val(x).data(), val(kernel).data(), &g, want);
                accumulate_opt(grads, x, cg.input);
                accumulate_opt(grads, kernel, cg.kernel);
                accumulate_opt(grads, bias, cg.bias);
            }
            Op::Pointwise { x, weight, bias, co } => {
                let (x, weight, bias, co) = (*x, *weight, *bias, *co);
                let want = [wants(x), wants(weight), wants(bias)];
                let cg =
                    kernels::pointwise_backward(val(x).shape(), co, val(x).data(), val(weight).data(), &g, want);
                accumulate_opt(grads, x, cg.input);
                accumulate_opt(grads, weight, cg.kernel);
                accumulate_opt(grads, bias, cg.bias);
            }
            Op::LayerNorm { x, scale, shift, xhat, rstd } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let (gx, gs, gb) =
                    kernels::layer_norm_backward(val(x).shape(), xhat, rstd, val(scale).data(), &g);
                if wants(x) {
                    accumulate(grads, x, gx);
                }
                if wants(scale) {
                    accumulate(grads, scale, gs);
                }
                if wants(shift) {
                    accumulate(grads, shift, gb);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let d = val(x).data().iter().zip(&g).map(|(&v, &gi)| gi * gelu_grad(v)).collect();
                accumulate(grads, x, d);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let d = val(b).data().iter().zip(&g).map(|(&y, &gi)| y * gi).collect();
                    accumulate(grads, a, d);
                }
                if wants(b) {
                    let d = val(a).data().iter().zip(&g).map(|(&x, &gi)| x * gi).collect();
                    accumulate(grads, b, d);
                }
            }
            Op::ScaleChannels { x, scale } => {
                let (x, scale) = (*x, *scale);
                let s = val(x).shape();
                let plane = s.plane();
                if wants(x) {
                    let sv = val(scale).data();
                    let d = g.iter().enumerate().map(|(i, &gi)| gi * sv[(i / plane) % s.c]).collect();
                    accumulate(grads, x, d);
                }
                if wants(scale) {
                    let mut gs = vec![T::zero(); s.c];
                    let xv = val(x).data();
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        gs[(i / plane) % s.c] += gi * xi;
                    }
                    accumulate(grads, scale, gs);
                }
            }
            Op::AddScalar(x) => {
                let x = *x;
                accumulate(grads, x, g);
            }
            Op::MulScalar(x, c) => {
                let (x, c) = (*x, *c);
                accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            Op::Exp(x) => {
                let x = *x;
                let d = out.iter().zip(&g).map(|(&e, &gi)| e * gi).collect();
                accumulate(grads, x, d);
            }
            Op::Log(x, eps) => {
                let (x, eps) = (*x, *eps);
                let d = val(x).data().iter().zip(&g).map(|(&v, &gi)| gi / (v + eps)).collect();
                accumulate(grads, x, d);
            }
            Op::Abs(x) => {
                let x = *x;
                let d = val(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else if v < T::zero() { -gi } else { T::zero() })
                    .collect();
                accumulate(grads, x, d);
            }
            Op::SqrtOffset(x) => {
                let x = *x;
                let half = T::lit(0.5);
                let d = out.iter().zip(&g).map(|(&s, &gi)| gi * half / s).collect();
                accumulate(grads, x, d);
            }
            Op::ForwardDiff(x, axis) => {
                let (x, axis) = (*x, *axis);
                let s = val(x).shape();
                let mut d = vec![T::zero(); s.len()];
                match axis {
                    Axis::Horizontal => {
                        for (drow, grow) in d.chunks_mut(s.w).zip(g.chunks(s.w - 1)) {
                            for (j, &gi) in grow.iter().enumerate() {
                                drow[j + 1] += gi;
                                drow[j] -= gi;
                            }
                        }
                    }
                    Axis::Vertical => {
                        for (dp, gp) in d.chunks_mut(s.plane()).zip(g.chunks((s.h - 1) * s.w)) {
                            for (i, &gi) in gp.iter().enumerate() {
                                dp[i + s.w] += gi;
                                dp[i] -= gi;
                            }
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            Op::PadEnd(x, axis) => {
                let (x, axis) = (*x, *axis);
                let s = val(x).shape();
                let d = match axis {
                    Axis::Horizontal => g.chunks(s.w + 1).flat_map(|row| row[..s.w].to_vec()).collect(),
                    Axis::Vertical => g.chunks((s.h + 1) * s.w).flat_map(|p| p[..s.plane()].to_vec()).collect(),
                };
                accumulate(grads, x, d);
            }
            Op::Crop(x) => {
                let x = *x;
                let s = val(x).shape();
                let os = node.value.shape();
                let mut d = vec![T::zero(); s.len()];
                for (dp, gp) in d.chunks_mut(s.plane()).zip(g.chunks(os.plane())) {
                    for y in 0..os.h {
                        dp[y * s.w..y * s.w + os.w].copy_from_slice(&gp[y * os.w..(y + 1) * os.w]);
                    }
                }
                accumulate(grads, x, d);
            }
            Op::ReduceSum(x) => {
                let x = *x;
                let n = val(x).len();
                accumulate(grads, x, vec![g[0]; n]);
            }
            Op::ReduceMean(x) => {
                let x = *x;
                let n = val(x).len();
                accumulate(grads, x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::ReduceVar(x) => {
                let x = *x;
                let xv = val(x).data();
                let d = variance_grad(xv, g[0]);
                accumulate(grads, x, d);
            }
            Op::SampleMean(x) => {
                let x = *x;
                let s = val(x).shape();
                let per = s.len() / s.n;
                let scale = T::one() / T::lit(per as f64);
                let d = (0..s.n).flat_map(|n| std::iter::repeat_n(g[n] * scale, per)).collect();
                accumulate(grads, x, d);
            }
            Op::SampleVar(x) => {
                let x = *x;
                let s = val(x).shape();
                let d = (0..s.n).flat_map(|n| variance_grad(val(x).sample(n), g[n])).collect();
                accumulate(grads, x, d);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_opt<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Option<Vec<T>>) {
    if let Some(c) = contribution {
        accumulate(grads, v, c);
    }
}

fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64)
}

fn variance<T: Real>(xs: &[T]) -> T {
    let m = mean(xs);
    xs.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::lit(xs.len() as f64)
}

fn variance_grad<T: Real>(xs: &[T], g: T) -> Vec<T> {
    let m = mean(xs);
    let k = T::lit(2.0) * g / T::lit(xs.len() as f64);
    xs.iter().map(|&v| k * (v - m)).collect()
}

fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp_fast() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(x) + x * pdf
}
