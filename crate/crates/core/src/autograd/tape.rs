//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every builder method validates shapes, computes the forward value,
//! checks it for non-finite entries and appends a node. [`Tape::backward`]
//! walks the nodes in reverse, producing one gradient per node.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, WkvTrace};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the spike nonlinearity behaves in the forward pass. The reverse pass
/// always uses the sigmoid surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeForward {
    /// Binary Heaviside output.
    Binary,
    /// Sigmoid of the scaled potential; the surrogate becomes the exact
    /// derivative, which is what finite-difference checks need.
    Smooth,
}

pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    ScaleBy { x: Var, s: Var },
    MulPerSample { x: Var, s: Var },
    Sigmoid(Var),
    Srelu(Var),
    Softplus(Var),
    Exp(Var),
    Recip(Var),
    Heaviside { v: Var, threshold: f64, alpha: f64 },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    UpNearest { x: Var, factor: usize },
    UpBilinear { x: Var, factor: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Concat { parts: Vec<Var> },
    Reshape(Var),
    ToTokens(Var),
    FromTokens(Var),
    Matmul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    AddLeading { x: Var, b: Var },
    RelBias { table: Var, index: Vec<usize> },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Wkv { k: Var, v: Var, w: Var, bonus: Var, trace: WkvTrace },
    MeanPerSample(Var),
    MeanPixels(Var),
    Mse { a: Var, target: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn elementwise(t: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect(),
    )
    .expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Node holding the given parameter, if this tape read it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op_name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn build(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        self.push(op_name, value, op)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Registers a parameter read. Repeated reads of the same parameter on
    /// one tape share a node, so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---- convolution and pooling -------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, kci, kh, kw) = self.value(w).dims4()?;
        if kci != ci {
            return Err(Error::dim("conv2d", format!("input has {ci} channels, kernel expects {kci}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extent {kh}x{kw} must be square and odd")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("input {h}x{wd} too small for kernel {kh} with pad {pad}")));
        }
        let geom = ConvGeom { n, ci, h, w: wd, co, k: kh, stride, pad };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        self.build("conv2d", vec![n, co, ho, wo], out, Op::Conv2d { x, w, geom })
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 || self.value(b).numel() != xs[1] {
            return Err(Error::dim("add_channel_bias", format!("bias {:?} vs input {xs:?}", self.shape(b))));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv[(i / inner) % c];
        }
        self.build("add_channel_bias", xs, out, Op::ChannelBias { x, b })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::dim("maxpool2d", format!("window {k} on {h}x{w}")));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    // strict comparison keeps the first maximum in scan order
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.build("maxpool2d", vec![n, c, ho, wo], out, Op::MaxPool { x, argmax })
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("avgpool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.value(x).data();
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * ho + y / k) * wo + xx / k] += xd[(plane * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        self.build("avgpool2d", vec![n, c, ho, wo], out, Op::AvgPool { x, k })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::dim("upsample_nearest", "zero factor"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(plane * ho + y) * wo + xx] = xd[(plane * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.build("upsample_nearest", vec![n, c, ho, wo], out, Op::UpNearest { x, factor })
    }

    /// Bilinear upsampling by an integer factor, half-pixel aligned
    /// (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::dim("upsample_bilinear", "zero factor"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for y in 0..ho {
                let (y0, y1, fy) = kernels::bilinear_taps(y, factor, h);
                for xx in 0..wo {
                    let (x0, x1, fx) = kernels::bilinear_taps(xx, factor, w);
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    out[(plane * ho + y) * wo + xx] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.build("upsample_bilinear", vec![n, c, ho, wo], out, Op::UpBilinear { x, factor })
    }

    /// Batch normalisation over (N, H, W) per channel. Returns the batch
    /// mean and biased variance in training mode so the caller can update
    /// its running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("batchnorm2d", format!("affine parameters must have {c} entries")));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            sq += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = sq / m;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batchnorm2d", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / plane) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = *xh * gd[ch] + bd[ch];
        }
        let var_out = self.build(
            "batchnorm2d",
            vec![n, c, h, w],
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
        )?;
        Ok((var_out, train.then_some((mean, var))))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.build(name, shape, data, op)
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

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// Multiplies every element by a single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", format!("scale must be a scalar, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        self.unary("scale_by", x, |v| v * sv, Op::ScaleBy { x, s })
    }

    /// Multiplies each batch item of `x` by the matching entry of `s` (shape `[N]`).
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || self.value(s).numel() != xs[0] {
            return Err(Error::dim("mul_per_sample", format!("{:?} vs {xs:?}", self.shape(s))));
        }
        let inner = self.value(x).numel() / xs[0];
        let sv = self.value(s).data().to_vec();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sv[i / inner]).collect();
        self.build("mul_per_sample", xs, data, Op::MulPerSample { x, s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Squared ReLU, `max(x, 0)^2`.
    pub fn srelu(&mut self, x: Var) -> Result<Var> {
        self.unary("srelu", x, |v| if v > 0.0 { v * v } else { 0.0 }, Op::Srelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary("recip", x, |v| 1.0 / v, Op::Recip(x))
    }

    /// Spike nonlinearity `S = Θ(v - threshold)` with `Θ(0) = 1`. The
    /// reverse pass uses `alpha * σ'(alpha * (v - threshold))`.
    pub fn heaviside(&mut self, v: Var, threshold: f64, alpha: f64, forward: SpikeForward) -> Result<Var> {
        let f = move |x: f64| match forward {
            SpikeForward::Binary => {
                if x - threshold >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeForward::Smooth => sigmoid(alpha * (x - threshold)),
        };
        self.unary("heaviside", v, f, Op::Heaviside { v, threshold, alpha })
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim("concat_channels", format!("{:?} vs {:?}", self.shape(p), self.shape(parts[0]))));
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        self.build("concat_channels", vec![n, total, h, w], out, Op::Concat { parts: parts.to_vec() })
    }

    /// `[N, C, H, W]` to token-major `[N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let data = transpose_last2(self.value(x).data(), n, c, h * w);
        self.build("to_tokens", vec![n, h * w, c], data, Op::ToTokens(x))
    }

    /// `[N, H*W, C]` back to `[N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, t, c) = self.value(x).dims3()?;
        if t != h * w {
            return Err(Error::dim("from_tokens", format!("{t} tokens cannot form a {h}x{w} map")));
        }
        let data = transpose_last2(self.value(x).data(), n, t, c);
        self.build("from_tokens", vec![n, c, h, w], data, Op::FromTokens(x))
    }

    // ---- matrix products and attention ---------------------------------

    /// Batched `a · b` (or `a · bᵀ`). `a` is `[B, m, k]`; `b` is `[B, k, n]`
    /// or a shared `[k, n]` (transposed: `[B, n, k]` / `[n, k]`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = self.value(a).dims3()?;
        let bs = self.shape(b).to_vec();
        let (shared, r, c) = match bs[..] {
            [r, c] => (true, r, c),
            [bb, r, c] if bb == batch => (false, r, c),
            _ => return Err(Error::dim("matmul", format!("{bs:?} cannot multiply [{batch}, {m}, {k}]"))),
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if kb != k {
            return Err(Error::dim("matmul", format!("inner extents {k} vs {kb}")));
        }
        let stride = if shared { 0 } else { k * n };
        let out = kernels::batched_matmul(batch, self.value(a).data(), self.value(b).data(), stride, m, k, n, trans_b);
        self.build("matmul", vec![batch, m, n], out, Op::Matmul { a, b, trans_b })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let len = *self.shape(x).last().ok_or_else(|| Error::dim("softmax", "rank 0"))?;
        let data = kernels::softmax_rows(self.value(x).data(), len);
        let shape = self.shape(x).to_vec();
        self.build("softmax", shape, data, Op::Softmax(x))
    }

    /// `x[b, ...] + t[...]` for every leading index `b`.
    pub fn add_leading(&mut self, x: Var, t: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1..] != *self.shape(t) {
            return Err(Error::dim("add_leading", format!("{:?} vs {xs:?}", self.shape(t))));
        }
        let inner = self.value(t).numel();
        let tv = self.value(t).data().to_vec();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + tv[i % inner]).collect();
        self.build("add_leading", xs, data, Op::AddLeading { x, b: t })
    }

    /// Gathers an `[n, n]` bias matrix from a `(2h-1)(2w-1)` table indexed by
    /// the row/column offset between two tokens of an `h x w` grid.
    pub fn relative_bias(&mut self, table: Var, h: usize, w: usize) -> Result<Var> {
        let size = (2 * h - 1) * (2 * w - 1);
        if self.value(table).numel() != size {
            return Err(Error::dim("relative_bias", format!("table needs {size} entries for a {h}x{w} grid")));
        }
        let n = h * w;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = (i / w, i % w);
            for j in 0..n {
                let (yj, xj) = (j / w, j % w);
                let dy = yi + h - 1 - yj;
                let dx = xi + w - 1 - xj;
                index.push(dy * (2 * w - 1) + dx);
            }
        }
        let tv = self.value(table).data();
        let data = index.iter().map(|&i| tv[i]).collect();
        self.build("relative_bias", vec![n, n], data, Op::RelBias { table, index })
    }

    /// Rotates channel pairs `(2j, 2j+1)` of an NCHW map by per-pixel
    /// angles. `cos`/`sin` are laid out `[H*W][C/2]`.
    pub fn rope(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        if c % 2 != 0 || cos.len() != plane * c / 2 || sin.len() != cos.len() {
            return Err(Error::dim("rope", format!("angle table does not fit {c} channels over {h}x{w}")));
        }
        let data = rotate_pairs(self.value(x).data(), n, c, plane, &cos, &sin, 1.0);
        self.build("rope", vec![n, c, h, w], data, Op::Rope { x, cos, sin })
    }

    /// Weighted key-value recurrence over token sequences `[N, L, C]`.
    /// `w` is `[N, L, C]` (per-step decay) or `[N, 1, C]` (one decay per
    /// sequence); `bonus` is `exp(u)`, shape `[C]`.
    pub fn wkv(&mut self, k: Var, v: Var, w: Var, bonus: Var, eps: f64) -> Result<Var> {
        let (n, len, c) = self.value(k).dims3()?;
        same_shape("wkv", self.value(k), self.value(v))?;
        let (wn, wl, wc) = self.value(w).dims3()?;
        if wn != n || wc != c || (wl != len && wl != 1) {
            return Err(Error::dim("wkv", format!("decay {:?} vs keys {:?}", self.shape(w), self.shape(k))));
        }
        if self.value(bonus).numel() != c {
            return Err(Error::dim("wkv", "bonus must have one entry per channel"));
        }
        if len == 0 {
            return Err(Error::Input("wkv over an empty sequence".into()));
        }
        let trace = kernels::wkv_forward(
            n,
            len,
            c,
            self.value(k).data(),
            self.value(v).data(),
            self.value(w).data(),
            wl,
            self.value(bonus).data(),
            eps,
        )
        .map_err(|(b, i, ch, d)| {
            Error::numeric("wkv", format!("denominator {d:e} below {eps:e} at patch {i} (batch {b}, channel {ch})"))
        })?;
        let out = trace.out.clone();
        self.build("wkv", vec![n, len, c], out, Op::Wkv { k, v, w, bonus, trace })
    }

    // ---- reductions ------------------------------------------------------

    /// Mean over all non-batch axes, giving shape `[N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).first().ok_or_else(|| Error::dim("mean_per_sample", "rank 0"))?;
        let inner = self.value(x).numel() / n;
        let data = self.value(x).data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
        self.build("mean_per_sample", vec![n], data, Op::MeanPerSample(x))
    }

    /// Spatial mean of an NCHW map, giving `[N, C]`.
    pub fn mean_pixels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.build("mean_pixels", vec![n, c], data, Op::MeanPixels(x))
    }

    /// Mean squared error against a constant target, as a one-element tensor.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        same_shape("mse", self.value(a), target)?;
        let d = target.numel() as f64;
        let total: f64 = self.value(a).data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.build("mse", vec![1], vec![total / d], Op::Mse { a, target: target.data().to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.build("sum", vec![1], vec![total], Op::Sum(x))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::dim("backward", format!("output must be scalar, got {:?}", self.shape(output))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that adds each touched parameter's gradient into the
    /// store exactly once. Zeroing between steps is the caller's job.
    pub fn backward_into(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(output)?;
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let shaped = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g.data());
                acc(*x, shaped(*x, dx));
                acc(*w, shaped(*w, dw));
            }
            Op::ChannelBias { x, b } => {
                let xs = val(*x).shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let mut db = vec![0.0; c];
                for (j, &gv) in g.data().iter().enumerate() {
                    db[(j / inner) % c] += gv;
                }
                acc(*x, g.clone());
                acc(*b, shaped(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, elementwise(val(*b), g, |y, gv| y * gv));
                acc(*b, elementwise(val(*a), g, |x, gv| x * gv));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::ScaleBy { x, s } => {
                let sv = val(*s).data()[0];
                let ds: f64 = val(*x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                acc(*x, g.map(|v| v * sv));
                acc(*s, shaped(*s, vec![ds]));
            }
            Op::MulPerSample { x, s } => {
                let n = val(*s).numel();
                let inner = val(*x).numel() / n;
                let sv = val(*s).data();
                let mut ds = vec![0.0; n];
                let mut dx = vec![0.0; g.numel()];
                for (j, (&gv, &xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                    dx[j] = gv * sv[j / inner];
                    ds[j / inner] += gv * xv;
                }
                acc(*x, shaped(*x, dx));
                acc(*s, shaped(*s, ds));
            }
            Op::Sigmoid(x) => acc(*x, elementwise(&node.value, g, |y, gv| gv * y * (1.0 - y))),
            Op::Srelu(x) => acc(*x, elementwise(val(*x), g, |v, gv| if v > 0.0 { 2.0 * v * gv } else { 0.0 })),
            Op::Softplus(x) => acc(*x, elementwise(val(*x), g, |v, gv| gv * sigmoid(v))),
            Op::Exp(x) => acc(*x, elementwise(&node.value, g, |y, gv| gv * y)),
            Op::Recip(x) => acc(*x, elementwise(&node.value, g, |y, gv| -gv * y * y)),
            Op::Heaviside { v, threshold, alpha } => {
                acc(
                    *v,
                    elementwise(val(*v), g, |x, gv| {
                        let s = sigmoid(alpha * (x - threshold));
                        gv * alpha * s * (1.0 - s)
                    }),
                );
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                acc(*x, shaped(*x, dx));
            }
            Op::AvgPool { x, k } => {
                let (_, _, h, w) = val(*x).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; val(*x).numel()];
                for (j, d) in dx.iter_mut().enumerate() {
                    let plane = j / (h * w);
                    let y = (j / w) % h;
                    let xx = j % w;
                    *d = g.data()[(plane * ho + y / k) * wo + xx / k] * scale;
                }
                acc(*x, shaped(*x, dx));
            }
            Op::UpNearest { x, factor } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(plane * h + y / factor) * w + xx / factor] += g.data()[(plane * ho + y) * wo + xx];
                        }
                    }
                }
                acc(*x, shaped(*x, dx));
            }
            Op::UpBilinear { x, factor } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        let (y0, y1, fy) = kernels::bilinear_taps(y, *factor, h);
                        for xx in 0..wo {
                            let (x0, x1, fx) = kernels::bilinear_taps(xx, *factor, w);
                            let gv = g.data()[(plane * ho + y) * wo + xx];
                            d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            d[y1 * w + x0] += gv * fy * (1.0 - fx);
                            d[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(*x, shaped(*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gd = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, (&gv, &xh)) in g.data().iter().zip(xhat).enumerate() {
                    let ch = (j / plane) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                let mut dx = vec![0.0; g.numel()];
                for (j, d) in dx.iter_mut().enumerate() {
                    let ch = (j / plane) % c;
                    let dxhat = g.data()[j] * gd[ch];
                    *d = if *train {
                        // dbeta = Σ dy and dgamma = Σ dy·x̂, so the batch
                        // sums of dx̂ are gamma times those.
                        inv_std[ch] / m * (m * dxhat - gd[ch] * dbeta[ch] - xhat[j] * gd[ch] * dgamma[ch])
                    } else {
                        dxhat * inv_std[ch]
                    };
                }
                acc(*x, shaped(*x, dx));
                acc(*gamma, shaped(*gamma, dgamma));
                acc(*beta, shaped(*beta, dbeta));
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).shape()[1];
                    let mut dp = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        let start = (b * total + offset) * plane;
                        dp.extend_from_slice(&g.data()[start..start + pc * plane]);
                    }
                    acc(p, shaped(p, dp));
                    offset += pc;
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape())?),
            Op::ToTokens(x) => {
                let (n, c, h, w) = val(*x).dims4()?;
                acc(*x, shaped(*x, transpose_last2(g.data(), n, h * w, c)));
            }
            Op::FromTokens(x) => {
                let (n, t, c) = val(*x).dims3()?;
                acc(*x, shaped(*x, transpose_last2(g.data(), n, c, t)));
            }
            Op::Matmul { a, b, trans_b } => {
                let (batch, m, k) = val(*a).dims3()?;
                let n = *node.value.shape().last().expect("rank 3");
                let shared = val(*b).ndim() == 2;
                let stride = if shared { 0 } else { k * n };
                let (da, db) = kernels::batched_matmul_backward(
                    batch,
                    val(*a).data(),
                    val(*b).data(),
                    stride,
                    m,
                    k,
                    n,
                    *trans_b,
                    g.data(),
                );
                acc(*a, shaped(*a, da));
                acc(*b, shaped(*b, db));
            }
            Op::Softmax(x) => {
                let len = *node.value.shape().last().expect("rank >= 1");
                acc(*x, shaped(*x, kernels::softmax_rows_backward(node.value.data(), g.data(), len)));
            }
            Op::AddLeading { x, b } => {
                let inner = val(*b).numel();
                let mut db = vec![0.0; inner];
                for (j, &gv) in g.data().iter().enumerate() {
                    db[j % inner] += gv;
                }
                acc(*x, g.clone());
                acc(*b, shaped(*b, db));
            }
            Op::RelBias { table, index } => {
                let mut dt = vec![0.0; val(*table).numel()];
                for (&ti, &gv) in index.iter().zip(g.data()) {
                    dt[ti] += gv;
                }
                acc(*table, shaped(*table, dt));
            }
            Op::Rope { x, cos, sin } => {
                let (n, c, h, w) = val(*x).dims4()?;
                acc(*x, shaped(*x, rotate_pairs(g.data(), n, c, h * w, cos, sin, -1.0)));
            }
            Op::Wkv { k, v, w, bonus, trace } => {
                let (n, len, c) = val(*k).dims3()?;
                let wl = val(*w).shape()[1];
                let gr = kernels::wkv_backward(
                    n,
                    len,
                    c,
                    val(*k).data(),
                    val(*v).data(),
                    val(*w).data(),
                    wl,
                    val(*bonus).data(),
                    trace,
                    g.data(),
                );
                acc(*k, shaped(*k, gr.keys));
                acc(*v, shaped(*v, gr.values));
                acc(*w, shaped(*w, gr.decay));
                acc(*bonus, shaped(*bonus, gr.bonus));
            }
            Op::MeanPerSample(x) => {
                let n = g.numel();
                let inner = val(*x).numel() / n;
                let dx = (0..val(*x).numel()).map(|j| g.data()[j / inner] / inner as f64).collect();
                acc(*x, shaped(*x, dx));
            }
            Op::MeanPixels(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let dx = (0..val(*x).numel()).map(|j| g.data()[j / plane] / plane as f64).collect();
                acc(*x, shaped(*x, dx));
            }
            Op::Mse { a, target } => {
                let d = target.len() as f64;
                let gv = g.data()[0];
                let da = val(*a).data().iter().zip(target).map(|(x, y)| gv * 2.0 * (x - y) / d).collect();
                acc(*a, shaped(*a, da));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

/// Swaps the last two axes of `[n, r, c]` data.
fn transpose_last2(x: &[f64], n: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Rotates channel pairs by `direction * angle` (direction -1 applies the
/// inverse rotation, which is the adjoint).
fn rotate_pairs(x: &[f64], n: usize, c: usize, plane: usize, cos: &[f64], sin: &[f64], direction: f64) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for j in 0..half {
            let e = (b * c + 2 * j) * plane;
            let o = e + plane;
            for p in 0..plane {
                let (ct, st) = (cos[p * half + j], direction * sin[p * half + j]);
                let (a, bb) = (x[e + p], x[o + p]);
                out[e + p] = ct * a - st * bb;
                out[o + p] = st * a + ct * bb;
            }
        }
    }
    out
}
