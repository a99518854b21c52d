//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward op appends a node holding its output value and the
//! information its backward rule needs. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, add_into, gemm, ConvGeom, Layout};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Running mean/variance for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool { .. } => "avgpool",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// leaf var -> parameter index in the store it was bound from
    bound_params: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound_params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        let value = t.with_requires_grad(false);
        self.push_unchecked(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a named parameter as a leaf. Repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.bound_params.get(&idx) {
            return Ok(v);
        }
        let t = store.get_index(idx).clone().with_requires_grad(true);
        let v = self.leaf(t);
        self.bound_params.insert(idx, v);
        Ok(v)
    }

    /// Adds the accumulated gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut bound: Vec<_> = self.bound_params.iter().collect();
        bound.sort();
        for (&idx, &v) in bound {
            if let Some(g) = self.grad(v) {
                store.get_index_mut(idx).accumulate_grad(g);
            }
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.data(a),
            Layout::row_major(m, k),
            self.data(b),
            Layout::row_major(k, n),
            0.0,
            &mut out,
        );
        self.push(&[m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product over the leading axis: `[g×m×k] · [g×k×n]`, or with
    /// `trans_b` the second operand is stored `[g×n×k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let lb = if trans_b {
            Layout::transposed(n, k)
        } else {
            Layout::row_major(k, n)
        };
        for g in 0..batch {
            gemm(
                1.0,
                &da[g * m * k..][..m * k],
                Layout::row_major(m, k),
                &db[g * k * n..][..k * n],
                lb,
                0.0,
                &mut out[g * m * n..][..m * n],
            );
        }
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        self.push(&[batch, m, n], out, op, &[a, b])
    }

    /// `x·w + bias` for `x: [r×in]`, `w: [in×out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ----- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        if self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        self.push(&sx, out, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Tanh(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    // ----- normalization ----------------------------------------------------

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        self.push(&shape, out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Last-axis softmax over `[.., T, T]` score blocks where query row `t`
    /// may only attend to keys `0..=t`. Masked weights are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::Invalid(format!(
                "causal softmax needs square trailing block, got {shape:?}"
            )));
        }
        let len = shape[r - 1];
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (row_idx, (row, dst)) in src.chunks(len).zip(out.chunks_mut(len)).enumerate() {
            let t = row_idx % len;
            let allowed = &row[..=t];
            let max = allowed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(allowed) {
                *d = (v - max).exp();
                total += *d;
            }
            dst[..=t].iter_mut().for_each(|d| *d /= total);
        }
        let outer = src.len() / len;
        self.push(
            &shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner: 1,
            },
            &[x],
        )
    }

    /// Normalizes over the last axis, then applies `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let rows = src.len() / d;
        let mut normed = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in src.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (n, v) in normed[r * d..][..d].iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let out = normed
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((n, g), b)| n * g + b))
            .collect();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        self.push(&shape, out, op, &[x, gain, bias])
    }

    /// Per-channel batch normalization of an NHWC tensor.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &mut RunningStats,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(gain).numel() != c || self.value(bias).numel() != c || stats.mean.len() != c {
            return Err(Error::Shape {
                op: "batchnorm2d",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let count = src.len() / c;
        let (mean, inv_std) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                for row in src.chunks(c) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for row in src.chunks(c) {
                    for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    stats.mean[ch] =
                        (1.0 - BATCHNORM_MOMENTUM) * stats.mean[ch] + BATCHNORM_MOMENTUM * mean[ch];
                    stats.var[ch] = (1.0 - BATCHNORM_MOMENTUM) * stats.var[ch]
                        + BATCHNORM_MOMENTUM * var[ch] * unbias;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
                (mean, inv_std)
            }
            NormMode::Eval => (
                stats.mean.clone(),
                stats.var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect::<Vec<_>>(),
            ),
        };
        let mut normed = vec![0.0; src.len()];
        for (dst, row) in normed.chunks_mut(c).zip(src.chunks(c)) {
            for ch in 0..c {
                dst[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let out = normed
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((n, g), b)| n * g + b))
            .collect();
        let op = Op::BatchNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
            mode,
        };
        self.push(&shape, out, op, &[x, gain, bias])
    }

    // ----- convolution and pooling -----------------------------------------

    /// Cross-correlation of `x: [n,h,w,cin]` with `kernel: [kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let out_dim = |dim: usize, k: usize| -> Result<usize> {
            let span = dim + 2 * padding;
            if span < k {
                return Err(Error::Config(format!(
                    "conv2d output collapses: input {dim} + 2·{padding} < kernel {k}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sk[0],
            kw: sk[1],
            cout: sk[3],
            stride,
            pad: padding,
            oh: out_dim(sx[1], sk[0])?,
            ow: out_dim(sx[2], sk[1])?,
        };
        let (xd, kd) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; geom.n * geom.out_pixels() * geom.cout];
        let in_len = geom.h * geom.w * geom.cin;
        let out_len = geom.out_pixels() * geom.cout;
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geom.out_pixels() * geom.patch_len()]
        };
        for s in 0..geom.n {
            let img = &xd[s * in_len..][..in_len];
            let patches: &[f64] = if geom.is_pointwise() {
                img
            } else {
                kernels::im2col(img, &geom, &mut cols);
                &cols
            };
            gemm(
                1.0,
                patches,
                Layout::row_major(geom.out_pixels(), geom.patch_len()),
                kd,
                Layout::row_major(geom.patch_len(), geom.cout),
                0.0,
                &mut out[s * out_len..][..out_len],
            );
        }
        let shape = [geom.n, geom.oh, geom.ow, geom.cout];
        self.push(&shape, out, Op::Conv2d { x, kernel, geom }, &[x, kernel])
    }

    /// Max pooling over `[n,h,w,c]` with a square window and no padding.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
            return Err(Error::Config(format!(
                "maxpool2d kernel {kernel} stride {stride} on shape {s:?}"
            )));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = self.data(x);
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                        let o = ((b * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        self.push(&[n, oh, ow, c], out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Mean over the full spatial extent: `[n,h,w,c] -> [n,c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Invalid(format!("avgpool expects NHWC, got {s:?}")));
        }
        let (n, spatial, c) = (s[0], s[1] * s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let dst = &mut out[b * c..][..c];
            for row in src[b * spatial * c..][..spatial * c].chunks(c) {
                add_into(dst, row);
            }
            dst.iter_mut().for_each(|v| *v /= spatial as f64);
        }
        self.push(&[n, c], out, Op::GlobalAvgPool { x, spatial }, &[x])
    }

    // ----- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::permute(self.data(x), &shape, perm, &mut out);
        self.push(&out_shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!("concat axis {axis} for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..][..chunk]);
            }
        }
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push(&out_shape, out, op, parts)
    }

    /// Selects rows along the leading axis (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row_len = self.value(x).numel() / shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::Invalid(format!(
                "row index {bad} out of range for {} rows",
                shape[0]
            )));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("gather_rows with no rows".into()));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&src[r * row_len..][..row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(&out_shape, out, op, &[x])
    }

    /// Row lookup into an embedding `table: [vocab×dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    // ----- loss -------------------------------------------------------------

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [t×c]`, skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= c) {
            return Err(Error::Invalid(format!("target class {bad} outside [0, {c})")));
        }
        let count = targets.iter().filter(|&&t| t != ignore_index).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every position is ignored".into()));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, (row, p)) in src.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for (pp, v) in p.iter_mut().zip(row) {
                *pp = (v - log_z).exp();
            }
            if targets[r] != ignore_index {
                loss += log_z - row[targets[r]];
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore_index,
            probs,
            count,
        };
        self.push(&[1], vec![loss / count as f64], op, &[logits])
    }

    // ----- backward -----------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(node.op.name()));
            }
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[id] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            // pass-through gradients are handed on without copying
            match node.op {
                Op::Reshape(x) => give(&self.nodes, &mut work, x, g),
                Op::Add(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        give(&self.nodes, &mut work, b, g.clone());
                    }
                    give(&self.nodes, &mut work, a, g);
                }
                Op::AddBias { x, bias } => {
                    if let Some(db) = slot(&self.nodes, &mut work, bias) {
                        let c = db.len();
                        for row in g.chunks(c) {
                            add_into(db, row);
                        }
                    }
                    give(&self.nodes, &mut work, x, g);
                }
                _ => backward_node(&self.nodes, id, &g, &mut work),
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Returns the gradient slot for `v`, allocating zeros on first use, or
/// `None` when `v` does not need a gradient.
fn slot<'a>(nodes: &[Node], work: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(work[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Adds an owned gradient into `v`'s slot, taking ownership when empty.
fn give(nodes: &[Node], work: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut work[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if let Some(da) = slot(nodes, work, *a) {
                // dA += G · Bᵀ
                gemm(1.0, g, Layout::row_major(m, n), val(*b), Layout::transposed(k, n), 1.0, da);
            }
            if let Some(db) = slot(nodes, work, *b) {
                // dB += Aᵀ · G
                gemm(1.0, val(*a), Layout::transposed(m, k), g, Layout::row_major(m, n), 1.0, db);
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            if let Some(da) = slot(nodes, work, a) {
                let bl = if trans_b {
                    Layout::row_major(n, k)
                } else {
                    Layout::transposed(k, n)
                };
                for i in 0..batch {
                    gemm(
                        1.0,
                        &g[i * m * n..][..m * n],
                        Layout::row_major(m, n),
                        &val(b)[i * k * n..][..k * n],
                        bl,
                        1.0,
                        &mut da[i * m * k..][..m * k],
                    );
                }
            }
            if let Some(db) = slot(nodes, work, b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..][..m * n];
                    let ai = &val(a)[i * m * k..][..m * k];
                    let dbi = &mut db[i * k * n..][..k * n];
                    if trans_b {
                        // stored [n×k]: dB += Gᵀ · A
                        gemm(1.0, gi, Layout::transposed(m, n), ai, Layout::row_major(m, k), 1.0, dbi);
                    } else {
                        gemm(1.0, ai, Layout::transposed(m, k), gi, Layout::row_major(m, n), 1.0, dbi);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, work, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, work, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, work, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, work, *b) {
                db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, work, *a) {
                for ((d, g), y) in da.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * y;
                }
            }
            if let Some(db) = slot(nodes, work, *b) {
                for ((d, g), x) in db.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * x;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(dx) = slot(nodes, work, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(nodes, work, *bias) {
                let c = db.len();
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, work, *x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(nodes, work, *x) {
                for ((d, g), v) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, work, *x) {
                for ((d, g), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = slot(nodes, work, *x) {
                for ((d, g), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            if let Some(dx) = slot(nodes, work, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] += out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let d = nodes[gain.0].value.numel();
            let gv = val(*gain);
            if let Some(dgain) = slot(nodes, work, *gain) {
                for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                    for ((dg, g), n) in dgain.iter_mut().zip(gr).zip(nr) {
                        *dg += g * n;
                    }
                }
            }
            if let Some(dbias) = slot(nodes, work, *bias) {
                for gr in g.chunks(d) {
                    add_into(dbias, gr);
                }
            }
            if let Some(dx) = slot(nodes, work, *x) {
                let mut dn = vec![0.0; d];
                for (r, ((gr, nr), dxr)) in g.chunks(d).zip(normed.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    for ((o, g), w) in dn.iter_mut().zip(gr).zip(gv) {
                        *o = g * w;
                    }
                    let mean_dn = dn.iter().sum::<f64>() / d as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, dni), ni) in dxr.iter_mut().zip(&dn).zip(nr) {
                        *o += inv_std[r] * (dni - mean_dn - ni * mean_dn_n);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
            mode,
        } => {
            let c = nodes[gain.0].value.numel();
            let gv = val(*gain);
            let mut sum_g = vec![0.0; c];
            let mut sum_gn = vec![0.0; c];
            for (gr, nr) in g.chunks(c).zip(normed.chunks(c)) {
                for ch in 0..c {
                    sum_g[ch] += gr[ch];
                    sum_gn[ch] += gr[ch] * nr[ch];
                }
            }
            if let Some(dgain) = slot(nodes, work, *gain) {
                add_into(dgain, &sum_gn);
            }
            if let Some(dbias) = slot(nodes, work, *bias) {
                add_into(dbias, &sum_g);
            }
            if let Some(dx) = slot(nodes, work, *x) {
                let count = (g.len() / c) as f64;
                for ((dxr, gr), nr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(normed.chunks(c)) {
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        dxr[ch] += match mode {
                            NormMode::Eval => scale * gr[ch],
                            NormMode::Train => {
                                scale * (gr[ch] - sum_g[ch] / count - nr[ch] * sum_gn[ch] / count)
                            }
                        };
                    }
                }
            }
        }
        Op::Conv2d { x, kernel, geom } => {
            let geom = *geom;
            let in_len = geom.h * geom.w * geom.cin;
            let out_len = geom.out_pixels() * geom.cout;
            let (xd, kd) = (val(*x), val(*kernel));
            let pix = geom.out_pixels();
            let plen = geom.patch_len();
            let mut cols = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; pix * plen]
            };
            if let Some(dk) = slot(nodes, work, *kernel) {
                for s in 0..geom.n {
                    let img = &xd[s * in_len..][..in_len];
                    let patches: &[f64] = if geom.is_pointwise() {
                        img
                    } else {
                        kernels::im2col(img, &geom, &mut cols);
                        &cols
                    };
                    gemm(
                        1.0,
                        patches,
                        Layout::transposed(pix, plen),
                        &g[s * out_len..][..out_len],
                        Layout::row_major(pix, geom.cout),
                        1.0,
                        dk,
                    );
                }
            }
            if let Some(dx) = slot(nodes, work, *x) {
                for s in 0..geom.n {
                    let gs = &g[s * out_len..][..out_len];
                    let dxs = &mut dx[s * in_len..][..in_len];
                    if geom.is_pointwise() {
                        gemm(1.0, gs, Layout::row_major(pix, geom.cout), kd, Layout::transposed(plen, geom.cout), 1.0, dxs);
                    } else {
                        gemm(1.0, gs, Layout::row_major(pix, geom.cout), kd, Layout::transposed(plen, geom.cout), 0.0, &mut cols);
                        kernels::col2im_add(&cols, &geom, dxs);
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, work, *x) {
                for (g, &at) in g.iter().zip(argmax) {
                    dx[at] += g;
                }
            }
        }
        Op::GlobalAvgPool { x, spatial } => {
            if let Some(dx) = slot(nodes, work, *x) {
                let c = g.len() / nodes[x.0].value.shape()[0];
                for (b, gb) in g.chunks(c).enumerate() {
                    for row in dx[b * spatial * c..][..spatial * c].chunks_mut(c) {
                        for (d, g) in row.iter_mut().zip(gb) {
                            *d += g / *spatial as f64;
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, work, *x) {
                add_into(dx, g);
            }
        }
        Op::Permute { x, perm } => {
            if let Some(dx) = slot(nodes, work, *x) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let out_shape = nodes[id].value.shape();
                let mut tmp = vec![0.0; g.len()];
                kernels::permute(g, out_shape, &inverse, &mut tmp);
                add_into(dx, &tmp);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = nodes[id].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p.0].value.shape()[*axis] * inner;
                if let Some(dp) = slot(nodes, work, p) {
                    for o in 0..outer {
                        add_into(&mut dp[o * chunk..][..chunk], &g[o * row + offset..][..chunk]);
                    }
                }
                offset += chunk;
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(dx) = slot(nodes, work, *x) {
                let row_len = g.len() / rows.len();
                for (gr, &r) in g.chunks(row_len).zip(rows) {
                    add_into(&mut dx[r * row_len..][..row_len], gr);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
            probs,
            count,
        } => {
            if let Some(dl) = slot(nodes, work, *logits) {
                let c = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    let row = &mut dl[r * c..][..c];
                    for (d, p) in row.iter_mut().zip(&probs[r * c..][..c]) {
                        *d += scale * p;
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, work, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
