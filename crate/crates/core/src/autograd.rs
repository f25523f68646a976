//! Reverse-mode differentiation over an explicit tape.
//!
//! A [`Tape`] is built per forward call and dropped after [`Tape::backward`].
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and a reverse sweep visits every node after all of its
//! consumers.

use crate::error::{Error, Result};
use crate::quant::{self, QuantMode, QuantScheme};
use crate::tensor::{self, mm_nn, mm_nt, mm_tn, normal_cdf, normal_pdf, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `[.., k] · [k, n]`, leading axes flattened into `m`.
    Linear {
        x: Var,
        w: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Gelu {
        x: Var,
        cdf: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MeanPool {
        x: Var,
        batch: usize,
        seq: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    FakeQuant {
        x: Var,
        step: Var,
        scheme: QuantScheme,
    },
    Ternary {
        w: Var,
    },
}

/// Op kind without payload, for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Linear,
    BatchMatmul,
    Add,
    AddBias,
    Scale,
    Reshape,
    Gelu,
    Softmax,
    LayerNorm,
    SplitHeads,
    MergeHeads,
    MeanPool,
    Gather,
    Sum,
    Mse,
    CrossEntropy,
    FakeQuant,
    Ternary,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchMatmul { .. } => OpKind::BatchMatmul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::FakeQuant { .. } => OpKind::FakeQuant,
            Op::Ternary { .. } => OpKind::Ternary,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `x[.., k] · w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::dims("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Linear { x, w, m, k, n }, rg))
    }

    /// Strict 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        self.linear(a, b)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]`
    /// transposed when `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dims("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let a_blk = &ad[i * m * k..(i + 1) * m * k];
                let b_blk = &bd[i * k * n..(i + 1) * k * n];
                let o = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    mm_nt(a_blk, b_blk, o, m, k, n);
                } else {
                    mm_nn(a_blk, b_blk, o, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).shape() != [n] {
            return Err(Error::dims("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cdf: Vec<T> = xv.data().iter().map(|&v| normal_cdf(v)).collect();
        let value = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x, cdf }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dims(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (y, normalized, inv_std) = tensor::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// `[B, S, H·D] → [B·H, S, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(heads) {
            return Err(Error::dims("split_heads", &s, &[heads]));
        }
        let (batch, seq, d) = (s[0], s[1], s[2]);
        let hd = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * d + h * hd;
                    let to = ((b * heads + h) * seq + t) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch * heads, seq, hd], out),
            Op::SplitHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// `[B·H, S, D] → [B, S, H·D]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(heads) {
            return Err(Error::dims("merge_heads", &s, &[heads]));
        }
        let (batch, seq, hd) = (s[0] / heads, s[1], s[2]);
        let d = hd * heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * d + h * hd;
                    let from = ((b * heads + h) * seq + t) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, seq, d], out),
            Op::MergeHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// Mean over the sequence axis, `[B, S, D] → [B, D]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dims("mean_pool", &s, &[]));
        }
        let (batch, seq, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let inv = T::one() / T::lit(seq as f64);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            for t in 0..seq {
                let row = &src[(b * seq + t) * d..(b * seq + t + 1) * d];
                for (o, &v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, d], out),
            Op::MeanPool { x, batch, seq },
            rg,
        ))
    }

    /// Selects rows of a `[V, D]` table; output shape is `out_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != rows.len() {
            return Err(Error::dims("gather", &ts, out_shape));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Input(format!("row {bad} out of range for table of {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { table, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dims("mse", va.shape(), vb.shape()));
        }
        let total: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::lit(va.numel() as f64));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dims("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if labels.iter().any(|&l| l >= c) {
            return Err(Error::Input(format!("label outside {c} classes")));
        }
        let probs = tensor::softmax_rows(self.value(logits)).into_data();
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * c + l].max(T::lit(1e-30)).ln();
        }
        let value = Tensor::scalar(loss / T::lit(labels.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Uniform quantization with a learnable step and straight-through
    /// gradients. `step` holds one value, or one per channel of the last axis.
    pub fn fake_quant(&mut self, x: Var, step: Var, scheme: QuantScheme) -> Result<Var> {
        if scheme.mode == QuantMode::Ternary {
            return Err(Error::contract("ternary sites use Tape::ternary"));
        }
        if self.value(step).data().iter().any(|&s| s.is_nan() || s <= T::zero()) {
            return Err(Error::contract("quantization step sizes must be positive"));
        }
        let value = quant::fake_quantize(self.value(x), &scheme, self.value(step).data())?;
        let rg = self.rg(&[x, step]);
        Ok(self.push(value, Op::FakeQuant { x, step, scheme }, rg))
    }

    /// Ternary (TWN) quantization; gradients pass straight through.
    pub fn ternary(&mut self, w: Var) -> Var {
        let value = quant::ternarize_twn(self.value(w)).quantized;
        let rg = self.rg(&[w]);
        self.push(value, Op::Ternary { w }, rg)
    }

    /// Gradients of a scalar `loss` with respect to every node that requires
    /// one. Contributions along multiple paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Linear { x, w, m, k, n } => {
                if self.wants(x) {
                    let mut dx = vec![T::zero(); m * k];
                    mm_nt(gd, self.value(w).data(), &mut dx, m, n, k);
                    accumulate(grads, x, self.value(x).shape(), dx);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); k * n];
                    mm_tn(self.value(x).data(), gd, &mut dw, m, k, n);
                    accumulate(grads, w, self.value(w).shape(), dw);
                }
            }
            &Op::BatchMatmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gb = &gd[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        let o = &mut da[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            // C = A·Bᵀ, B is [n×k]: dA = dC·B
                            mm_nn(gb, bb, o, m, n, k);
                        } else {
                            mm_nt(gb, bb, o, m, n, k);
                        }
                    }
                    accumulate(grads, a, self.value(a).shape(), da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gb = &gd[i * m * n..(i + 1) * m * n];
                        let ab = &ad[i * m * k..(i + 1) * m * k];
                        let o = &mut db[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            // dB = dCᵀ·A, [n×k]
                            mm_tn(gb, ab, o, m, n, k);
                        } else {
                            mm_tn(ab, gb, o, m, k, n);
                        }
                    }
                    accumulate(grads, b, self.value(b).shape(), db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g.shape(), gd.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.shape(), gd.to_vec());
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    accumulate(grads, x, g.shape(), gd.to_vec());
                }
                if self.wants(bias) {
                    let n = g.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, &[n], db);
                }
            }
            &Op::Scale { x, factor } => {
                if self.wants(x) {
                    accumulate(grads, x, g.shape(), gd.iter().map(|&v| v * factor).collect());
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    accumulate(grads, x, self.value(x).shape(), gd.to_vec());
                }
            }
            Op::Gelu { x, cdf } => {
                let x = *x;
                if self.wants(x) {
                    let dx = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(cdf)
                        .zip(gd)
                        .map(|((&v, &c), &up)| up * (c + v * normal_pdf(v)))
                        .collect();
                    accumulate(grads, x, g.shape(), dx);
                }
            }
            &Op::Softmax { x } => {
                if self.wants(x) {
                    let n = g.last_dim();
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, x, g.shape(), dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let dn = T::lit(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &normalized[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, g.shape(), dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, &[d], dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *beta, &[d], db);
                }
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                if self.wants(x) {
                    let d = self.value(x).last_dim();
                    let hd = d / heads;
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let to = (b * seq + t) * d + h * hd;
                                let from = ((b * heads + h) * seq + t) * hd;
                                dx[to..to + hd].copy_from_slice(&gd[from..from + hd]);
                            }
                        }
                    }
                    accumulate(grads, x, self.value(x).shape(), dx);
                }
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                if self.wants(x) {
                    let hd = self.value(x).last_dim();
                    let d = hd * heads;
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let from = (b * seq + t) * d + h * hd;
                                let to = ((b * heads + h) * seq + t) * hd;
                                dx[to..to + hd].copy_from_slice(&gd[from..from + hd]);
                            }
                        }
                    }
                    accumulate(grads, x, self.value(x).shape(), dx);
                }
            }
            &Op::MeanPool { x, batch, seq } => {
                if self.wants(x) {
                    let d = g.last_dim();
                    let inv = T::one() / T::lit(seq as f64);
                    let mut dx = vec![T::zero(); batch * seq * d];
                    for b in 0..batch {
                        for t in 0..seq {
                            for j in 0..d {
                                dx[(b * seq + t) * d + j] = gd[b * d + j] * inv;
                            }
                        }
                    }
                    accumulate(grads, x, self.value(x).shape(), dx);
                }
            }
            Op::Gather { table, rows } => {
                if self.wants(*table) {
                    let shape = self.value(*table).shape();
                    let d = shape[1];
                    let mut dt = vec![T::zero(); shape[0] * d];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dt[r * d + j] += gd[i * d + j];
                        }
                    }
                    accumulate(grads, *table, shape, dt);
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    let s = self.value(x).shape();
                    accumulate(grads, x, s, vec![gd[0]; self.value(x).numel()]);
                }
            }
            &Op::Mse { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let c = T::lit(2.0) * gd[0] / T::lit(va.numel() as f64);
                if self.wants(a) {
                    let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| c * (x - y)).collect();
                    accumulate(grads, a, va.shape(), d);
                }
                if self.wants(b) {
                    let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| c * (y - x)).collect();
                    accumulate(grads, b, vb.shape(), d);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).last_dim();
                    let scale = gd[0] / T::lit(labels.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dl[i * c + l] -= scale;
                    }
                    accumulate(grads, *logits, self.value(*logits).shape(), dl);
                }
            }
            &Op::FakeQuant { x, step, scheme } => {
                let (gx, gs) = quant::ste_backward_raw(self.value(x), &scheme, self.value(step).data(), g);
                if self.wants(x) {
                    accumulate(grads, x, g.shape(), gx.into_data());
                }
                if self.wants(step) {
                    accumulate(grads, step, self.value(step).shape(), gs);
                }
            }
            &Op::Ternary { w } => {
                if self.wants(w) {
                    accumulate(grads, w, g.shape(), gd.to_vec());
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}
