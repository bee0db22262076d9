//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one straight-line forward pass. Every op appends a node
//! holding its forward value and whatever it needs for the backward pass;
//! node ids are handed out in order, so inputs always precede outputs and the
//! reverse sweep in [`Tape::backward`] is a simple descending loop.
//!
//! ```
//! use pixemb_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```
//!
//! A tape is single-use: `backward` consumes it. Tapes built with
//! [`Tape::inference`] skip the saved context and cannot be differentiated.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{col2im, gemm, im2col, ConvGeometry};
use crate::quant::{binarize, QuantConfig, WeightScaling};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Scale,
    Relu,
    MaxPool,
    MeanPool,
    BatchNorm,
    SoftmaxCrossEntropy,
    GatherColumns,
    Reshape,
    Permute,
    Sum,
    QuantizeActivation,
    QuantizeWeight,
}

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f32 },
    /// Normalize with fixed (running) statistics.
    Running {
        mean: &'a [f32],
        var: &'a [f32],
        eps: f32,
    },
}

/// Per-channel batch mean and biased variance observed by a batch-mode
/// batch-norm op.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Elements per channel that contributed to the statistics.
    pub count: usize,
}

enum Saved {
    None,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    GatherColumns {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    QuantizeActivation {
        x: Var,
        lo: f32,
        hi: f32,
    },
    QuantizeWeight(Var),
}

struct Node {
    kind: OpKind,
    value: Tensor,
    saved: Saved,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates ops without keeping backward context.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value, Saved::None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    fn push(&mut self, kind: OpKind, value: Tensor, saved: Saved) -> Var {
        let saved = if self.recording { saved } else { Saved::None };
        self.nodes.push(Node { kind, value, saved });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k` (fully connected layer with `(out, in)` weights).
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = av.dims2("matmul")?;
        let [r, c] = bv.dims2("matmul")?;
        let (kb, n) = if b_transposed { (c, r) } else { (r, c) };
        if k != kb {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), b_transposed, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(OpKind::MatMul, value, Saved::MatMul { a, b, b_transposed }))
    }

    /// NCHW input, OIHW kernel, symmetric zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = xv.dims4("conv2d")?;
        let [o, ci, kh, kw] = wv.dims4("conv2d")?;
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        if c != ci || !geom.fits() {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        let out = conv2d_forward(xv.data(), n, wv.data(), o, &geom);
        let value = Tensor::new(&[n, o, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(OpKind::Conv2d, value, Saved::Conv2d { x, w, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(OpKind::Add, value, Saved::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(OpKind::Mul, value, Saved::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(OpKind::Scale, value, Saved::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(OpKind::Relu, value, Saved::Relu(x))
    }

    /// Max pooling without padding; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("max-pool")?;
        let (ho, wo) = pool_out(xv.shape(), h, w, kernel, stride, "max-pool")?;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let src = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(OpKind::MaxPool, value, Saved::MaxPool { x, argmax }))
    }

    /// Average pooling without padding. `kernel == H == W` gives global pooling.
    pub fn mean_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("mean-pool")?;
        let (ho, wo) = pool_out(xv.shape(), h, w, kernel, stride, "mean-pool")?;
        let inv = 1.0 / (kernel * kernel) as f32;
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0f32;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        s += src[row..row + kernel].iter().sum::<f32>();
                    }
                    out.push(s * inv);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(OpKind::MeanPool, value, Saved::MeanPool { x, kernel, stride }))
    }

    /// Per-channel batch normalization over `(N, C)` or `(N, C, H, W)` input.
    /// Returns the batch statistics when normalizing with batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, c, spatial) = match xv.shape() {
            &[n, c] => (n, c, 1),
            &[n, c, h, w] => (n, c, h * w),
            s => return Err(Error::shape("batch-norm", s, &[0, 0, 0, 0])),
        };
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batch-norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let count = n * spatial;
        let src = xv.data();
        let channel_iter = |ch: usize| {
            (0..n).flat_map(move |i| {
                let base = (i * c + ch) * spatial;
                base..base + spatial
            })
        };
        let (mean, var, eps, batch_stats) = match mode {
            BatchNormMode::Batch { eps } => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| src[i]).sum::<f32>() / count as f32;
                    let v = channel_iter(ch)
                        .map(|i| {
                            let d = src[i] - m;
                            d * d
                        })
                        .sum::<f32>()
                        / count as f32;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch-norm", xv.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0f32; src.len()];
        let mut xhat = if self.recording { vec![0.0f32; src.len()] } else { Vec::new() };
        for ch in 0..c {
            for i in channel_iter(ch) {
                let xh = (src[i] - mean[ch]) * inv_std[ch];
                out[i] = xh * g[ch] + b[ch];
                if let Some(slot) = xhat.get_mut(i) {
                    *slot = xh;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let stats = batch_stats.then(|| BatchStats { mean, var, count });
        let v = self.push(
            OpKind::BatchNorm,
            value,
            Saved::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = lv.dims2("softmax-cross-entropy")?;
        if labels.len() != n {
            return Err(Error::shape("softmax-cross-entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss += (z.ln() + m - row[labels[i]]) as f64;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            OpKind::SoftmaxCrossEntropy,
            value,
            Saved::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Selects columns of a `(d, n)` matrix: output column `j` is column
    /// `indices[j]` of `table`. Equivalent to multiplying by 1-hot vectors.
    pub fn gather_columns(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [d, n] = tv.dims2("gather-columns")?;
        if indices.is_empty() {
            return Err(Error::InvalidInput("gather-columns needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let m = indices.len();
        let src = tv.data();
        let mut out = vec![0.0f32; d * m];
        for (k, row) in out.chunks_mut(m).enumerate() {
            let trow = &src[k * n..(k + 1) * n];
            for (o, &j) in row.iter_mut().zip(indices) {
                *o = trow[j];
            }
        }
        let value = Tensor::new(&[d, m], out)?;
        Ok(self.push(
            OpKind::GatherColumns,
            value,
            Saved::GatherColumns {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(OpKind::Reshape, value, Saved::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..xv.rank()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", xv.shape(), perm));
        }
        let (shape, data) = permute_data(xv.shape(), xv.data(), perm);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            OpKind::Permute,
            value,
            Saved::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(OpKind::Sum, value, Saved::Sum(x))
    }

    /// Uniform activation quantizer with the clipped straight-through backward.
    pub fn quantize_activation(&mut self, x: Var, config: &QuantConfig) -> Var {
        let value = self.value(x).map(|v| config.quantize(v));
        self.push(
            OpKind::QuantizeActivation,
            value,
            Saved::QuantizeActivation {
                x,
                lo: config.lo(),
                hi: config.hi(),
            },
        )
    }

    /// Sign-and-scale binarization; the backward pass is the identity and the
    /// scale is treated as a constant.
    pub fn quantize_weight(&mut self, w: Var, scaling: WeightScaling) -> Result<Var> {
        let b = binarize(self.value(w), scaling)?;
        Ok(self.push(OpKind::QuantizeWeight, b.values, Saved::QuantizeWeight(w)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Contract("backward on a non-recording tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.saved {
            Saved::None => {}
            Saved::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [m, k] = av.dims2("matmul")?;
                let n = node.value.shape()[1];
                // dA = dC · Bᵀ  (B stored k×n, or n×k when transposed)
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, bv.data(), !b_transposed, 0.0, &mut da);
                accumulate(grads, *a, &da);
                if *b_transposed {
                    // B is n×k: dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, av.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, &db);
                } else {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, 0.0, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Saved::Conv2d { x, w, geom } => {
                let (dx, dw) = conv2d_backward(self.value(*x), self.value(*w), geom, g);
                accumulate(grads, *x, &dx);
                accumulate(grads, *w, &dw);
            }
            Saved::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Saved::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f32> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Saved::Scale(x, f) => {
                let dx: Vec<f32> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *x, &dx);
            }
            Saved::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Saved::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, &dx);
            }
            Saved::MeanPool { x, kernel, stride } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4("mean-pool")?;
                let [_, _, ho, wo] = node.value.dims4("mean-pool")?;
                let inv = 1.0 / (kernel * kernel) as f32;
                let mut dx = vec![0.0; xv.len()];
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(plane * ho + oy) * wo + ox] * inv;
                            for ky in 0..*kernel {
                                let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                                for v in &mut dx[row..row + kernel] {
                                    *v += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Saved::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let spatial = xv.len() / (n * c);
                let count = (n * spatial) as f32;
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let idx = || {
                        (0..n).flat_map(move |i| {
                            let base = (i * c + ch) * spatial;
                            base..base + spatial
                        })
                    };
                    let (mut sg, mut sgx) = (0.0f32, 0.0f32);
                    for i in idx() {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let k = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        for i in idx() {
                            dx[i] = k / count * (count * g[i] - sg - xhat[i] * sgx);
                        }
                    } else {
                        for i in idx() {
                            dx[i] = k * g[i];
                        }
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Saved::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len() as f32;
                let mut dz: Vec<f32> = probs.iter().map(|p| p * g[0] / n).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= g[0] / n;
                }
                accumulate(grads, *logits, &dz);
            }
            Saved::GatherColumns { table, indices } => {
                let [d, n] = self.value(*table).dims2("gather-columns")?;
                let m = indices.len();
                let mut dt = vec![0.0f32; d * n];
                for k in 0..d {
                    let grow = &g[k * m..(k + 1) * m];
                    let trow = &mut dt[k * n..(k + 1) * n];
                    for (&j, &gv) in indices.iter().zip(grow) {
                        trow[j] += gv;
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Saved::Reshape(x) => accumulate(grads, *x, g),
            Saved::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, dx) = permute_data(node.value.shape(), g, &inverse);
                accumulate(grads, *x, &dx);
            }
            Saved::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &dx);
            }
            Saved::QuantizeActivation { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if *lo <= x && x <= *hi { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Saved::QuantizeWeight(w) => accumulate(grads, *w, g),
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn pool_out(
    shape: &[usize],
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    op: &'static str,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(Error::shape(op, shape, &[kernel, stride]));
    }
    Ok(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

fn permute_data(shape: &[usize], data: &[f32], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Float convolution via im2col + GEMM, parallel over samples.
pub(crate) fn conv2d_forward(x: &[f32], n: usize, w: &[f32], out_ch: usize, g: &ConvGeometry) -> Vec<f32> {
    let plane = g.out_height() * g.out_width();
    let in_len = g.channels * g.height * g.width;
    let patch = g.patch_len();
    let mut out = vec![0.0f32; n * out_ch * plane];
    out.par_chunks_mut(out_ch * plane)
        .enumerate()
        .for_each_init(
            || vec![0.0f32; if g.is_pointwise() { 0 } else { patch * plane }],
            |cols, (i, y)| {
                let xs = &x[i * in_len..(i + 1) * in_len];
                let b: &[f32] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, cols);
                    cols
                };
                gemm(out_ch, patch, plane, w, false, b, false, 0.0, y);
            },
        );
    out
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &ConvGeometry, dy: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let n = x.shape()[0];
    let out_ch = w.shape()[0];
    let plane = g.out_height() * g.out_width();
    let in_len = g.channels * g.height * g.width;
    let patch = g.patch_len();
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut cols = vec![0.0f32; patch * plane];
    let mut dcols = vec![0.0f32; patch * plane];
    for i in 0..n {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let dys = &dy[i * out_ch * plane..(i + 1) * out_ch * plane];
        let dxs = &mut dx[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(out_ch, plane, patch, dys, false, xs, true, 1.0, &mut dw);
            gemm(patch, out_ch, plane, w.data(), true, dys, false, 0.0, dxs);
        } else {
            im2col(xs, g, &mut cols);
            // dW += dY · colsᵀ
            gemm(out_ch, plane, patch, dys, false, &cols, true, 1.0, &mut dw);
            // dcols = Wᵀ · dY
            gemm(patch, out_ch, plane, w.data(), true, dys, false, 0.0, &mut dcols);
            col2im(&dcols, g, dxs);
        }
    }
    (dx, dw)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
