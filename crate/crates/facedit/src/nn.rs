//! Minimal neural-net plumbing: parameter containers, layer forward/backward
//! pairs, and an Adam optimizer. Everything is `f64` and hand-differentiated;
//! the finite-difference tests below pin every backward pass.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A 1-d parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param1 {
    pub v: Array1<f64>,
    pub g: Array1<f64>,
}

/// A 2-d parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param2 {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

/// A 4-d (conv kernel) parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param4 {
    pub v: Array4<f64>,
    pub g: Array4<f64>,
}

impl Param1 {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: Array1::zeros(n),
            g: Array1::zeros(n),
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            v: Array1::ones(n),
            g: Array1::zeros(n),
        }
    }
}

impl Param2 {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self {
            v: Array2::zeros((r, c)),
            g: Array2::zeros((r, c)),
        }
    }

    pub fn randn(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            v: Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal)),
            g: Array2::zeros((r, c)),
        }
    }

    /// He/Kaiming init for a (fan_in, fan_out) matrix.
    pub fn kaiming(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::randn(fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng)
    }
}

impl Param4 {
    pub fn zeros(cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        Self {
            v: Array4::zeros((cout, cin, kh, kw)),
            g: Array4::zeros((cout, cin, kh, kw)),
        }
    }

    pub fn kaiming(cout: usize, cin: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / (cin * kh * kw) as f64).sqrt();
        Self {
            v: Array4::from_shape_fn((cout, cin, kh, kw), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            g: Array4::zeros((cout, cin, kh, kw)),
        }
    }
}

/// Borrowed view of any parameter, used by the visitor plumbing (optimizer,
/// checkpoint IO, partition hashing).
pub enum ParamMut<'a> {
    P1(&'a mut Param1),
    P2(&'a mut Param2),
    P4(&'a mut Param4),
}

impl ParamMut<'_> {
    pub fn value_flat(&self) -> Vec<f64> {
        match self {
            ParamMut::P1(p) => p.v.iter().cloned().collect(),
            ParamMut::P2(p) => p.v.iter().cloned().collect(),
            ParamMut::P4(p) => p.v.iter().cloned().collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamMut::P1(p) => p.v.shape().to_vec(),
            ParamMut::P2(p) => p.v.shape().to_vec(),
            ParamMut::P4(p) => p.v.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_from_flat(&mut self, data: &[f64]) -> bool {
        if data.len() != self.len() {
            return false;
        }
        match self {
            ParamMut::P1(p) => p.v.iter_mut().zip(data).for_each(|(v, d)| *v = *d),
            ParamMut::P2(p) => p.v.iter_mut().zip(data).for_each(|(v, d)| *v = *d),
            ParamMut::P4(p) => p.v.iter_mut().zip(data).for_each(|(v, d)| *v = *d),
        }
        true
    }

    pub fn zero_grad(&mut self) {
        match self {
            ParamMut::P1(p) => p.g.fill(0.0),
            ParamMut::P2(p) => p.g.fill(0.0),
            ParamMut::P4(p) => p.g.fill(0.0),
        }
    }

    pub fn grad_flat(&self) -> Vec<f64> {
        match self {
            ParamMut::P1(p) => p.g.iter().cloned().collect(),
            ParamMut::P2(p) => p.g.iter().cloned().collect(),
            ParamMut::P4(p) => p.g.iter().cloned().collect(),
        }
    }

    pub fn add_to_grad(&mut self, data: &[f64]) {
        match self {
            ParamMut::P1(p) => p.g.iter_mut().zip(data).for_each(|(g, d)| *g += *d),
            ParamMut::P2(p) => p.g.iter_mut().zip(data).for_each(|(g, d)| *g += *d),
            ParamMut::P4(p) => p.g.iter_mut().zip(data).for_each(|(g, d)| *g += *d),
        }
    }

    /// In-place AXPY-style update of the value.
    pub fn update_value(&mut self, f: impl Fn(usize, f64) -> f64) {
        match self {
            ParamMut::P1(p) => p.v.iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v)),
            ParamMut::P2(p) => p.v.iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v)),
            ParamMut::P4(p) => p.v.iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v)),
        }
    }
}

/// Anything that can enumerate its named parameters in a stable order.
pub trait ParamVisitor {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, mut p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Flattened (name, shape, values) triples in visit order.
    fn export_params(&mut self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            out.push((name.to_string(), p.shape(), p.value_flat()));
        });
        out
    }

    fn import_params(&mut self, table: &HashMap<String, Vec<f64>>) -> Result<(), String> {
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        self.visit_params(&mut |name, mut p| match table.get(name) {
            Some(data) => {
                if !p.set_from_flat(data) {
                    bad_shape.push(name.to_string());
                }
            }
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(format!("missing parameters: {missing:?}"));
        }
        if !bad_shape.is_empty() {
            return Err(format!("shape mismatch for: {bad_shape:?}"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// `y = x w + b` for row-major batches.
pub fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += &b.view().insert_axis(Axis(0));
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient through SiLU given the pre-activation input.
pub fn silu_backward<D: ndarray::Dimension>(
    x_pre: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = x_pre.mapv(|v| {
        let s = sigmoid(v);
        s * (1.0 + v * (1.0 - s))
    });
    dx *= dy;
    dx
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Backward through row-wise softmax given its output `y`.
pub fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for i in 0..y.nrows() {
        let dot: f64 = y.row(i).iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..y.ncols() {
            dx[[i, j]] = y[[i, j]] * (dy[[i, j]] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Convolution (im2col)
// ---------------------------------------------------------------------------

/// 2-d convolution over a single (channels, h, w) sample.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param4,
    pub b: Param1,
    pub stride: usize,
    pub pad: usize,
}

/// Cached column matrix for the backward pass.
pub struct Conv2dCtx {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param4::kaiming(cout, cin, k, k, rng),
            b: Param1::zeros(cout),
            stride,
            pad: k / 2,
        }
    }

    pub fn new_zeroed(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            w: Param4::zeros(cout, cin, k, k),
            b: Param1::zeros(cout),
            stride,
            pad: k / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.v.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCtx) {
        let (cin, h, w) = x.dim();
        let (cout, cin_w, kh, kw) = self.w.v.dim();
        debug_assert_eq!(cin, cin_w, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, kh, self.stride, self.pad, ho, wo);
        let w_mat = self
            .w
            .v
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("kernel reshapes to matrix");
        let mut y_mat = w_mat.dot(&cols.t());
        y_mat += &self.b.v.view().insert_axis(Axis(1));
        let y = y_mat
            .into_shape_with_order((cout, ho, wo))
            .expect("output reshapes to feature map");
        (
            y,
            Conv2dCtx {
                cols,
                in_shape: (cin, h, w),
            },
        )
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &Conv2dCtx, dy: &Array3<f64>) -> Array3<f64> {
        let (cout, ho, wo) = dy.dim();
        let (cin, h, w) = ctx.in_shape;
        let kh = self.w.v.shape()[2];
        let dy_mat = dy
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("grad reshapes to matrix");
        // dW = dy cols, shaped back to the kernel.
        let dw = dy_mat.dot(&ctx.cols);
        {
            let mut wg = self
                .w
                .g
                .view_mut()
                .into_shape_with_order((cout, cin * kh * kh))
                .expect("kernel grad reshapes to matrix");
            wg += &dw;
        }
        self.b.g += &dy_mat.sum_axis(Axis(1));
        let w_mat = self
            .w
            .v
            .view()
            .into_shape_with_order((cout, cin * kh * kh))
            .expect("kernel reshapes to matrix");
        let d_cols = dy_mat.t().dot(&w_mat);
        col2im(&d_cols, cin, h, w, kh, self.stride, self.pad, ho, wo)
    }
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((ho * wo, cin * k * k));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            let mut col = 0usize;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            cols[[row, col]] = x[[c, iy as usize, ix as usize]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    d_cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((cin, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            let mut col = 0usize;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            dx[[c, iy as usize, ix as usize]] += d_cols[[row, col]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// GroupNorm with affine parameters over a (channels, h, w) sample.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Param1,
    pub beta: Param1,
    pub eps: f64,
}

pub struct GroupNormCtx {
    x: Array3<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        Self {
            groups,
            gamma: Param1::ones(channels),
            beta: Param1::zeros(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCtx) {
        let (c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut y = Array3::zeros((c, h, w));
        let mut means = Vec::with_capacity(self.groups);
        let mut inv_stds = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let slice = x.slice(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            let mean = slice.sum() / n;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            for c_off in 0..cg {
                let ch = g * cg + c_off;
                for iy in 0..h {
                    for ix in 0..w {
                        let xhat = (x[[ch, iy, ix]] - mean) * inv_std;
                        y[[ch, iy, ix]] = self.gamma.v[ch] * xhat + self.beta.v[ch];
                    }
                }
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        (
            y,
            GroupNormCtx {
                x: x.clone(),
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    pub fn backward(&mut self, ctx: &GroupNormCtx, dy: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = ctx.x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let mean = ctx.mean[g];
            let inv_std = ctx.inv_std[g];
            // Accumulate the two reduction terms of the normalization grad.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c_off in 0..cg {
                let ch = g * cg + c_off;
                for iy in 0..h {
                    for ix in 0..w {
                        let xhat = (ctx.x[[ch, iy, ix]] - mean) * inv_std;
                        let dxhat = dy[[ch, iy, ix]] * self.gamma.v[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        self.gamma.g[ch] += dy[[ch, iy, ix]] * xhat;
                        self.beta.g[ch] += dy[[ch, iy, ix]];
                    }
                }
            }
            for c_off in 0..cg {
                let ch = g * cg + c_off;
                for iy in 0..h {
                    for ix in 0..w {
                        let xhat = (ctx.x[[ch, iy, ix]] - mean) * inv_std;
                        let dxhat = dy[[ch, iy, ix]] * self.gamma.v[ch];
                        dx[[ch, iy, ix]] =
                            inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        }
        dx
    }
}

/// LayerNorm over the last axis of a (tokens, features) matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param1,
    pub beta: Param1,
    pub eps: f64,
}

pub struct LayerNormCtx {
    x: Array2<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param1::ones(dim),
            beta: Param1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCtx) {
        let (rows, d) = x.dim();
        let mut y = Array2::zeros((rows, d));
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            for j in 0..d {
                let xhat = (x[[i, j]] - mean) * inv_std;
                y[[i, j]] = self.gamma.v[j] * xhat + self.beta.v[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        (
            y,
            LayerNormCtx {
                x: x.clone(),
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    pub fn backward(&mut self, ctx: &LayerNormCtx, dy: &Array2<f64>) -> Array2<f64> {
        let (rows, d) = ctx.x.dim();
        let n = d as f64;
        let mut dx = Array2::zeros((rows, d));
        for i in 0..rows {
            let mean = ctx.mean[i];
            let inv_std = ctx.inv_std[i];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let xhat = (ctx.x[[i, j]] - mean) * inv_std;
                let dxhat = dy[[i, j]] * self.gamma.v[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                self.gamma.g[j] += dy[[i, j]] * xhat;
                self.beta.g[j] += dy[[i, j]];
            }
            for j in 0..d {
                let xhat = (ctx.x[[i, j]] - mean) * inv_std;
                let dxhat = dy[[i, j]] * self.gamma.v[j];
                dx[[i, j]] = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample_nearest2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[ch, y / 2, x / 2]] += dy[[ch, y, x]];
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(c, |ch| x.index_axis(Axis(0), ch).sum() / n)
}

pub fn global_avg_pool_backward(dy: &Array1<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = dy.len();
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| dy[ch] / n)
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal position embedding of a timestep index.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy over a batch of logits; returns `(loss, dlogits)`.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let (b, _k) = logits.dim();
    assert_eq!(b, targets.len());
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut d = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs[[i, t]].max(1e-300).ln();
        d[[i, t]] -= 1.0;
    }
    (loss / b as f64, d / b as f64)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every parameter the model visits for which
    /// `trainable` returns true, then clears those gradients.
    pub fn step<M: ParamVisitor + ?Sized>(
        &mut self,
        model: &mut M,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        model.visit_params(&mut |name, mut p| {
            if !trainable(name) {
                return;
            }
            let g = p.grad_flat();
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(ndarray::IxDyn(&[g.len()])));
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(ndarray::IxDyn(&[g.len()])));
            for (i, gi) in g.iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            }
            let m = m.clone();
            let v = v.clone();
            p.update_value(|i, w| {
                let mhat = m[i] / b1c;
                let vhat = v[i] / b2c;
                w - lr * mhat / (vhat.sqrt() + eps)
            });
            p.zero_grad();
        });
    }
}
