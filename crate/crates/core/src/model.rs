//! Post-norm transformer encoder with mean-pooled classification, and its
//! quantized twin.
//!
//! Both models share one graph builder. The full-precision model is the
//! builder with no quantization plan; the quantized model inserts a
//! quantizer at every placement site returned by [`placement_sites`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, QSPEC_PREFIX};
use crate::quant::{self, Granularity, QuantMode, QuantScheme};
use crate::tensor::{Scalar, Tensor, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            vocab: 64,
            max_seq_len: 16,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.d_model,
            self.heads,
            self.d_ff,
            self.vocab,
            self.max_seq_len,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::contract(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub(crate) fn as_array(&self) -> [usize; 7] {
        [
            self.layers,
            self.d_model,
            self.heads,
            self.d_ff,
            self.vocab,
            self.max_seq_len,
            self.num_classes,
        ]
    }

    pub(crate) fn from_array(a: [usize; 7]) -> Self {
        Self {
            layers: a[0],
            d_model: a[1],
            heads: a[2],
            d_ff: a[3],
            vocab: a[4],
            max_seq_len: a[5],
            num_classes: a[6],
        }
    }
}

/// Bit-widths for transformer weights, the embedding table and activations.
/// `None` disables quantization for that class of sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BitWidths {
    pub weight: Option<u32>,
    pub embedding: Option<u32>,
    pub activation: Option<u32>,
}

impl BitWidths {
    pub fn new(weight: u32, embedding: u32, activation: u32) -> Self {
        Self {
            weight: Some(weight),
            embedding: Some(embedding),
            activation: Some(activation),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_disabled(&self) -> bool {
        self.weight.is_none() && self.embedding.is_none() && self.activation.is_none()
    }
}

impl FromStr for BitWidths {
    type Err = Error;

    /// Parses `W,E,A` (commas or dashes). `32` or `fp` disables a class.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', '-']).map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Usage(format!("bits must look like 4,4,8, got `{s}`")));
        }
        let one = |p: &str| -> Result<Option<u32>> {
            if p.eq_ignore_ascii_case("fp") || p == "32" {
                return Ok(None);
            }
            let b: u32 = p.parse().map_err(|_| Error::Usage(format!("bad bit-width `{p}`")))?;
            if !(2..=16).contains(&b) {
                return Err(Error::Usage(format!("bit-width {b} outside 2..=16")));
            }
            Ok(Some(b))
        };
        Ok(Self {
            weight: one(parts[0])?,
            embedding: one(parts[1])?,
            activation: one(parts[2])?,
        })
    }
}

impl fmt::Display for BitWidths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |v: Option<u32>| v.unwrap_or(32);
        write!(f, "{},{},{}", b(self.weight), b(self.embedding), b(self.activation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct QuantPlan {
    pub bits: BitWidths,
    /// One step per output channel for uniformly quantized weights.
    pub per_channel: bool,
}

impl QuantPlan {
    pub fn new(bits: BitWidths) -> Self {
        Self {
            bits,
            per_channel: false,
        }
    }

    fn weight_scheme(&self, bits: Option<u32>) -> Option<QuantScheme> {
        let bits = bits?;
        Some(if bits == 2 {
            QuantScheme {
                bits,
                mode: QuantMode::Ternary,
                granularity: Granularity::PerTensor,
            }
        } else {
            QuantScheme {
                bits,
                mode: QuantMode::Symmetric,
                granularity: if self.per_channel {
                    Granularity::PerChannel
                } else {
                    Granularity::PerTensor
                },
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SiteKind {
    Weight,
    ActivationSymmetric,
    ActivationAsymmetric,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site {
    pub id: String,
    pub kind: SiteKind,
}

impl Site {
    fn new(id: String, kind: SiteKind) -> Self {
        Self { id, kind }
    }

    /// Name of the step-size tensor for this site.
    pub fn step_name(&self) -> String {
        format!("{QSPEC_PREFIX}{}", self.id)
    }
}

pub(crate) mod names {
    pub const TOKEN_EMBED: &str = "embed.token";
    pub const POS_EMBED: &str = "embed.position";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn layer(l: usize, rest: &str) -> String {
        format!("layer.{l}.{rest}")
    }
}

const LAYER_WEIGHTS: [(&str, &str); 6] = [
    ("attn.query.weight", "attn.query.bias"),
    ("attn.key.weight", "attn.key.bias"),
    ("attn.value.weight", "attn.value.bias"),
    ("attn.output.weight", "attn.output.bias"),
    ("ffn.up.weight", "ffn.up.bias"),
    ("ffn.down.weight", "ffn.down.bias"),
];

/// Every quantized site in forward evaluation order.
///
/// Per layer: all six weight matrices, plus the input of every matrix
/// multiplication (both operands of `Q·Kᵀ` and `P·V`). The softmax output and
/// the GeLU output use the zero-anchored asymmetric grid; everything else is
/// symmetric. The embedding table comes first.
pub fn placement_sites(config: &ModelConfig) -> Vec<Site> {
    use SiteKind::*;
    let mut sites = vec![Site::new(names::TOKEN_EMBED.into(), Weight)];
    for l in 0..config.layers {
        let s = |rest: &str, kind| Site::new(names::layer(l, rest), kind);
        sites.extend([
            s("act.input", ActivationSymmetric),
            s("attn.query.weight", Weight),
            s("attn.key.weight", Weight),
            s("attn.value.weight", Weight),
            s("act.query", ActivationSymmetric),
            s("act.key", ActivationSymmetric),
            s("act.probs", ActivationAsymmetric),
            s("act.value", ActivationSymmetric),
            s("act.context", ActivationSymmetric),
            s("attn.output.weight", Weight),
            s("act.ffn_input", ActivationSymmetric),
            s("ffn.up.weight", Weight),
            s("act.gelu", ActivationAsymmetric),
            s("ffn.down.weight", Weight),
        ]);
    }
    sites
}

/// Components that stay in full precision.
pub fn skipped_components(config: &ModelConfig) -> Vec<String> {
    let mut out = vec![names::POS_EMBED.to_string()];
    for l in 0..config.layers {
        for (_, bias) in LAYER_WEIGHTS {
            out.push(names::layer(l, bias));
        }
        for norm in ["attn_norm", "ffn_norm"] {
            out.push(names::layer(l, &format!("{norm}.gamma")));
            out.push(names::layer(l, &format!("{norm}.beta")));
        }
        out.push(names::layer(l, "residual.attn"));
        out.push(names::layer(l, "residual.ffn"));
    }
    out.push(names::HEAD_WEIGHT.into());
    out.push(names::HEAD_BIAS.into());
    out
}

/// Integer token ids laid out `[batch × seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "token batch {batch}x{seq} with {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[&[usize]]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds {}",
                self.seq, config.max_seq_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= config.vocab) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of {}",
                config.vocab
            )));
        }
        Ok(())
    }
}

/// Hidden states `f_0..f_L` (each `[batch, seq, d_model]`) and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T = f32> {
    pub hidden: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

/// Outputs of each matrix multiplication in one layer (before bias).
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerTaps {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub scores: Var,
    pub context: Var,
    pub output: Var,
    pub ffn_up: Var,
    pub ffn_down: Var,
}

/// Graph builder shared by every forward and training path.
pub(crate) struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    config: &'a ModelConfig,
    store: &'a ParamStore<T>,
    plan: Option<QuantPlan>,
    trainable: Option<&'a BTreeSet<String>>,
    vars: HashMap<String, Var>,
    init_steps: bool,
    /// Step sizes created by an initialization pass.
    pub initialized: ParamStore<T>,
    /// Site ids quantized so far, in order.
    pub visited: Vec<String>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(config: &'a ModelConfig, store: &'a ParamStore<T>, plan: Option<QuantPlan>) -> Self {
        Self {
            tape: Tape::new(),
            config,
            store,
            plan: plan.filter(|p| !p.bits.is_disabled()),
            trainable: None,
            vars: HashMap::new(),
            init_steps: false,
            initialized: ParamStore::new(),
            visited: Vec::new(),
        }
    }

    pub fn with_trainable(mut self, names: &'a BTreeSet<String>) -> Self {
        self.trainable = Some(names);
        self
    }

    pub fn initializing_steps(mut self) -> Self {
        self.init_steps = true;
        self
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = match self.initialized.get(name) {
            Some(t) => t.clone(),
            None => self.store.require(name)?.clone(),
        };
        let v = if self.trainable.is_some_and(|t| t.contains(name)) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.insert(name.to_owned(), v);
        Ok(v)
    }

    fn step_var(&mut self, site: &str, scheme: &QuantScheme, x: Var) -> Result<Var> {
        let name = format!("{QSPEC_PREFIX}{site}");
        if self.init_steps && !self.store.contains(&name) && !self.initialized.contains(&name) {
            let xv = self.tape.value(x);
            let step = match scheme.granularity {
                Granularity::PerTensor => Tensor::scalar(quant::init_step_size(xv, scheme.bits, scheme.mode)),
                Granularity::PerChannel => {
                    let s = quant::init_step_sizes_per_channel(xv, scheme.bits, scheme.mode);
                    Tensor::from_parts(vec![s.len()], s)
                }
            };
            self.initialized.insert(name.clone(), step);
        }
        self.param(&name)
    }

    fn act_site(&mut self, site: String, x: Var, mode: QuantMode) -> Result<Var> {
        let Some(bits) = self.plan.and_then(|p| p.bits.activation) else {
            return Ok(x);
        };
        let scheme = QuantScheme {
            bits,
            mode,
            granularity: Granularity::PerTensor,
        };
        let step = self.step_var(&site, &scheme, x)?;
        self.visited.push(site);
        self.tape.fake_quant(x, step, scheme)
    }

    fn weight_site(&mut self, name: &str, bits: Option<u32>) -> Result<Var> {
        let w = self.param(name)?;
        let Some(scheme) = self.plan.and_then(|p| p.weight_scheme(bits)) else {
            return Ok(w);
        };
        self.visited.push(name.to_owned());
        if scheme.mode == QuantMode::Ternary {
            return Ok(self.tape.ternary(w));
        }
        let step = self.step_var(name, &scheme, w)?;
        self.tape.fake_quant(w, step, scheme)
    }

    fn weight(&mut self, name: &str) -> Result<Var> {
        let bits = self.plan.and_then(|p| p.bits.weight);
        self.weight_site(name, bits)
    }

    /// Token plus positional embeddings, `[batch, seq, d_model]`.
    pub fn embed(&mut self, tokens: &TokenBatch) -> Result<Var> {
        tokens.check(self.config)?;
        let bits = self.plan.and_then(|p| p.bits.embedding);
        let table = self.weight_site(names::TOKEN_EMBED, bits)?;
        let shape = [tokens.batch, tokens.seq];
        let tok = self.tape.gather(table, tokens.ids.clone(), &shape)?;
        let pos_table = self.param(names::POS_EMBED)?;
        let positions = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
        let pos = self.tape.gather(pos_table, positions, &shape)?;
        self.tape.add(tok, pos)
    }

    fn affine(&mut self, x: Var, weight: &str, bias: &str) -> Result<(Var, Var)> {
        let w = self.weight(weight)?;
        let prod = self.tape.linear(x, w)?;
        let b = self.param(bias)?;
        Ok((prod, self.tape.add_bias(prod, b)?))
    }

    fn norm(&mut self, x: Var, l: usize, which: &str) -> Result<Var> {
        let g = self.param(&names::layer(l, &format!("{which}.gamma")))?;
        let b = self.param(&names::layer(l, &format!("{which}.beta")))?;
        self.tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }

    /// One encoder layer on `x: [batch, seq, d_model]`.
    pub fn layer(&mut self, l: usize, x: Var) -> Result<(Var, LayerTaps)> {
        use QuantMode::{Asymmetric, Symmetric};
        if l >= self.config.layers {
            return Err(Error::contract(format!("layer {l} out of range")));
        }
        let heads = self.config.heads;
        let n = |rest: &str| names::layer(l, rest);

        let xq = self.act_site(n("act.input"), x, Symmetric)?;
        let (q_prod, q) = self.affine(xq, &n("attn.query.weight"), &n("attn.query.bias"))?;
        let (k_prod, k) = self.affine(xq, &n("attn.key.weight"), &n("attn.key.bias"))?;
        let (v_prod, v) = self.affine(xq, &n("attn.value.weight"), &n("attn.value.bias"))?;

        let qq = self.act_site(n("act.query"), q, Symmetric)?;
        let kq = self.act_site(n("act.key"), k, Symmetric)?;
        let qh = self.tape.split_heads(qq, heads)?;
        let kh = self.tape.split_heads(kq, heads)?;
        let scores = self.tape.batch_matmul(qh, kh, true)?;
        let scaled = self
            .tape
            .scale(scores, T::lit(1.0 / (self.config.head_dim() as f64).sqrt()));
        let probs = self.tape.softmax(scaled);
        let pq = self.act_site(n("act.probs"), probs, Asymmetric)?;
        let vq = self.act_site(n("act.value"), v, Symmetric)?;
        let vh = self.tape.split_heads(vq, heads)?;
        let context = self.tape.batch_matmul(pq, vh, false)?;
        let merged = self.tape.merge_heads(context, heads)?;
        let cq = self.act_site(n("act.context"), merged, Symmetric)?;
        let (o_prod, o) = self.affine(cq, &n("attn.output.weight"), &n("attn.output.bias"))?;
        let res1 = self.tape.add(x, o)?;
        let h1 = self.norm(res1, l, "attn_norm")?;

        let hq = self.act_site(n("act.ffn_input"), h1, Symmetric)?;
        let (up_prod, up) = self.affine(hq, &n("ffn.up.weight"), &n("ffn.up.bias"))?;
        let g = self.tape.gelu(up);
        let gq = self.act_site(n("act.gelu"), g, Asymmetric)?;
        let (down_prod, down) = self.affine(gq, &n("ffn.down.weight"), &n("ffn.down.bias"))?;
        let res2 = self.tape.add(h1, down)?;
        let out = self.norm(res2, l, "ffn_norm")?;

        let taps = LayerTaps {
            query: q_prod,
            key: k_prod,
            value: v_prod,
            scores,
            context,
            output: o_prod,
            ffn_up: up_prod,
            ffn_down: down_prod,
        };
        Ok((out, taps))
    }

    /// Mean-pool over the sequence, then the full-precision affine head.
    pub fn head(&mut self, h: Var) -> Result<Var> {
        let pooled = self.tape.mean_pool(h)?;
        let w = self.param(names::HEAD_WEIGHT)?;
        let b = self.param(names::HEAD_BIAS)?;
        let prod = self.tape.linear(pooled, w)?;
        self.tape.add_bias(prod, b)
    }

    /// Runs `range` of layers from `x`, returning each layer output.
    pub fn layers(&mut self, x: Var, range: Range<usize>) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(range.len());
        let mut h = x;
        for l in range {
            h = self.layer(l, h)?.0;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn gradients_for(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if self.tape.requires_grad(v) {
                if let Some(g) = grads.take(v) {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

/// Shared forward API of the full-precision and quantized models.
pub trait Network<T: Scalar> {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore<T>;
    fn quant_plan(&self) -> Option<QuantPlan>;

    fn forward(&self, tokens: &TokenBatch) -> Result<ForwardOutput<T>> {
        let mut g = graph_of(self);
        let f0 = g.embed(tokens)?;
        let outs = g.layers(f0, 0..self.config().layers)?;
        let last = *outs.last().unwrap_or(&f0);
        let logits = g.head(last)?;
        let mut hidden = vec![g.tape.value(f0).clone()];
        hidden.extend(outs.iter().map(|&v| g.tape.value(v).clone()));
        Ok(ForwardOutput {
            hidden,
            logits: g.tape.value(logits).clone(),
        })
    }

    /// Runs layers `[range.start, range.end)` from a hidden state
    /// `[batch, seq, d_model]`, returning every layer output.
    fn forward_layers(&self, input: &Tensor<T>, range: Range<usize>) -> Result<Vec<Tensor<T>>> {
        let c = self.config();
        if range.start > range.end || range.end > c.layers {
            return Err(Error::contract(format!(
                "layer range {range:?} outside [0, {})",
                c.layers
            )));
        }
        check_hidden(input, c)?;
        let mut g = graph_of(self);
        let x = g.input(input.clone());
        let outs = g.layers(x, range)?;
        Ok(outs.into_iter().map(|v| g.tape.value(v).clone()).collect())
    }

    fn embed(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let mut g = graph_of(self);
        let v = g.embed(tokens)?;
        Ok(g.tape.value(v).clone())
    }

    /// Mean squared error between the logits and `target`, with its
    /// gradient for every parameter in `wrt`.
    fn logit_mse_gradients(
        &self,
        tokens: &TokenBatch,
        target: &Tensor<T>,
        wrt: &BTreeSet<String>,
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let mut g = graph_of(self).with_trainable(wrt);
        let f0 = g.embed(tokens)?;
        let outs = g.layers(f0, 0..self.config().layers)?;
        let logits = g.head(*outs.last().unwrap_or(&f0))?;
        let target = g.input(target.clone());
        let loss = g.tape.mse(logits, target)?;
        let value = g.tape.value(loss).item().to_f64();
        Ok((value, g.gradients_for(loss)?))
    }

    fn classify(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        check_hidden(hidden, self.config())?;
        let mut g = graph_of(self);
        let x = g.input(hidden.clone());
        let v = g.head(x)?;
        Ok(g.tape.value(v).clone())
    }
}

fn graph_of<T: Scalar, N: Network<T> + ?Sized>(net: &N) -> Graph<'_, T> {
    Graph::new(net.config(), net.params(), net.quant_plan())
}

fn check_hidden<T: Scalar>(h: &Tensor<T>, c: &ModelConfig) -> Result<()> {
    if h.rank() != 3 || h.shape()[2] != c.d_model {
        return Err(Error::dims("hidden state", h.shape(), &[0, 0, c.d_model]));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Network<T> for Transformer<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn quant_plan(&self) -> Option<QuantPlan> {
        None
    }
}

impl<T: Scalar> Transformer<T> {
    /// Random initialization: weights uniform in `±1/sqrt(fan_in)`, token
    /// embeddings uniform in `±1`, positions in `±0.1`, biases zero and
    /// layer-norm gains one.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], a: f64| -> Tensor<T> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let d = config.d_model;
        let mut p = ParamStore::new();
        p.insert(names::TOKEN_EMBED, uniform(&[config.vocab, d], 1.0));
        p.insert(names::POS_EMBED, uniform(&[config.max_seq_len, d], 0.1));
        for l in 0..config.layers {
            for (w, b) in LAYER_WEIGHTS {
                let (fan_in, fan_out) = weight_shape(&config, w);
                p.insert(
                    names::layer(l, w),
                    uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
                );
                p.insert(names::layer(l, b), Tensor::zeros([fan_out]));
            }
            for norm in ["attn_norm", "ffn_norm"] {
                p.insert(names::layer(l, &format!("{norm}.gamma")), Tensor::ones([d]));
                p.insert(names::layer(l, &format!("{norm}.beta")), Tensor::zeros([d]));
            }
        }
        p.insert(
            names::HEAD_WEIGHT,
            uniform(&[d, config.num_classes], 1.0 / (d as f64).sqrt()),
        );
        p.insert(names::HEAD_BIAS, Tensor::zeros([config.num_classes]));
        Ok(Self { config, params: p })
    }

    /// All weights zero, layer-norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new_random(config, 0)?;
        let names: Vec<String> = m.params.names().map(str::to_owned).collect();
        for n in names {
            let t = m.params.get_mut(&n).unwrap();
            let fill = if n.ends_with(".gamma") { T::one() } else { T::zero() };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        Ok(m)
    }

    pub fn forward_fp(&self, tokens: &TokenBatch) -> Result<ForwardOutput<T>> {
        self.forward(tokens)
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

fn weight_shape(c: &ModelConfig, name: &str) -> (usize, usize) {
    match name {
        "ffn.up.weight" => (c.d_model, c.d_ff),
        "ffn.down.weight" => (c.d_ff, c.d_model),
        _ => (c.d_model, c.d_model),
    }
}

/// Latent full-precision weights plus learned step sizes (`qspec/<site>`).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T = f32> {
    pub config: ModelConfig,
    pub plan: QuantPlan,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Network<T> for QuantizedModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn quant_plan(&self) -> Option<QuantPlan> {
        Some(self.plan)
    }
}

impl<T: Scalar> QuantizedModel<T> {
    /// Copies the full-precision weights as latent weights and initializes
    /// every step size from data: weight steps from the weights, activation
    /// steps from one forward pass over `calib`.
    pub fn from_fp(fp: &Transformer<T>, plan: QuantPlan, calib: &TokenBatch) -> Result<Self> {
        let mut model = Self {
            config: fp.config,
            plan,
            params: fp.params.clone(),
        };
        if plan.bits.is_disabled() {
            return Ok(model);
        }
        let initialized = {
            let mut g = Graph::new(&model.config, &model.params, Some(plan)).initializing_steps();
            let f0 = g.embed(calib)?;
            g.layers(f0, 0..model.config.layers)?;
            g.initialized
        };
        model.params.merge(initialized);
        Ok(model)
    }

    /// Step-size tensors present in the model.
    pub fn step_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(QSPEC_PREFIX))
            .map(str::to_owned)
            .collect()
    }

    pub fn forward_quantized(&self, input_state: &Tensor<T>, layer_range: Range<usize>) -> Result<Vec<Tensor<T>>> {
        self.forward_layers(input_state, layer_range)
    }

    /// Site ids quantized by one full forward pass, in order.
    pub fn audit_sites(&self, tokens: &TokenBatch) -> Result<Vec<String>> {
        let mut g = graph_of(self);
        let f0 = g.embed(tokens)?;
        let outs = g.layers(f0, 0..self.config.layers)?;
        g.head(*outs.last().unwrap_or(&f0))?;
        Ok(g.visited)
    }

    pub fn cast<U: Scalar>(&self) -> QuantizedModel<U> {
        QuantizedModel {
            config: self.config,
            plan: self.plan,
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab: 10,
            max_seq_len: 6,
            num_classes: 3,
        }
    }

    fn tokens(batch: usize, seq: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenBatch::new(batch, seq, (0..batch * seq).map(|_| rng.gen_range(0..10)).collect()).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let m = Transformer::<f32>::new_random(small(), 1).unwrap();
        let out = m.forward_fp(&tokens(3, 5, 2)).unwrap();
        assert_eq!(out.hidden.len(), 3);
        for h in &out.hidden {
            assert_eq!(h.shape(), &[3, 5, 8]);
        }
        assert_eq!(out.logits.shape(), &[3, 3]);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Transformer::<f64>::zeros(small()).unwrap();
        let out = m.forward_fp(&tokens(2, 4, 3)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        let c = m.classify(&Tensor::zeros([2, 4, 8])).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let m = Transformer::<f64>::new_random(small(), 4).unwrap();
        let t = tokens(3, 4, 5);
        let perm = [2, 0, 1];
        let rows: Vec<&[usize]> = perm.iter().map(|&i| t.row(i)).collect();
        let tp = TokenBatch::from_rows(&rows).unwrap();
        let a = m.forward_fp(&t).unwrap().logits;
        let b = m.forward_fp(&tp).unwrap().logits;
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(&b.data()[j * 3..j * 3 + 3], &a.data()[i * 3..i * 3 + 3]);
        }
    }

    #[test]
    fn out_of_range_tokens_are_input_errors() {
        let m = Transformer::<f32>::new_random(small(), 1).unwrap();
        let bad = TokenBatch::new(1, 2, vec![0, 10]).unwrap();
        assert!(matches!(m.forward_fp(&bad), Err(Error::Input(_))));
        let long = TokenBatch::new(1, 7, vec![0; 7]).unwrap();
        assert!(matches!(m.forward_fp(&long), Err(Error::Input(_))));
    }

    #[test]
    fn placement_counts() {
        let one = placement_sites(&ModelConfig { layers: 1, ..small() });
        let weights = one.iter().filter(|s| s.kind == SiteKind::Weight).count();
        assert_eq!(weights, 7); // six layer matrices + embedding table
        let asym = one.iter().filter(|s| s.kind == SiteKind::ActivationAsymmetric).count();
        assert_eq!(asym, 2);
        assert!(one.iter().all(|s| !s.id.starts_with("head")));
        let two = placement_sites(&small());
        assert_eq!(two.len() - 1, 2 * (one.len() - 1));
        assert!(skipped_components(&small()).contains(&"head.weight".to_string()));
    }

    #[test]
    fn disabled_quantization_is_bit_identical() {
        let fp = Transformer::<f32>::new_random(small(), 7).unwrap();
        let t = tokens(2, 5, 8);
        let q = QuantizedModel::from_fp(&fp, QuantPlan::new(BitWidths::disabled()), &t).unwrap();
        assert_eq!(fp.forward_fp(&t).unwrap(), q.forward(&t).unwrap());
        assert!(q.step_names().is_empty());
    }

    #[test]
    fn every_site_quantized_once_in_placement_order() {
        let fp = Transformer::<f32>::new_random(small(), 7).unwrap();
        let t = tokens(2, 5, 8);
        for bits in [BitWidths::new(4, 4, 8), BitWidths::new(2, 2, 4)] {
            let q = QuantizedModel::from_fp(&fp, QuantPlan::new(bits), &t).unwrap();
            let visited = q.audit_sites(&t).unwrap();
            let expected: Vec<String> = placement_sites(&small()).into_iter().map(|s| s.id).collect();
            assert_eq!(visited, expected);
        }
    }

    #[test]
    fn ternary_embedding_uses_twn() {
        let fp = Transformer::<f64>::new_random(small(), 9).unwrap();
        let t = tokens(2, 3, 1);
        let q = QuantizedModel::from_fp(&fp, QuantPlan::new(BitWidths::new(4, 2, 8)), &t).unwrap();
        assert!(!q.params.contains("qspec/embed.token"));
        let twn = quant::ternarize_twn(fp.params.get(names::TOKEN_EMBED).unwrap()).quantized;
        let pos = fp.params.get(names::POS_EMBED).unwrap();
        let e = q.embed(&t).unwrap();
        let d = 8;
        for (i, &tok) in t.ids.iter().enumerate() {
            let p = i % t.seq;
            for j in 0..d {
                let want = twn.data()[tok * d + j] + pos.data()[p * d + j];
                assert_eq!(e.data()[i * d + j], want);
            }
        }
    }

    #[test]
    fn split_layer_ranges_compose() {
        let fp = Transformer::<f32>::new_random(small(), 11).unwrap();
        let t = tokens(2, 4, 12);
        let q = QuantizedModel::from_fp(&fp, QuantPlan::new(BitWidths::new(4, 4, 8)), &t).unwrap();
        let f0 = q.embed(&t).unwrap();
        let whole = q.forward_quantized(&f0, 0..2).unwrap();
        let first = q.forward_quantized(&f0, 0..1).unwrap();
        let second = q.forward_quantized(&first[0], 1..2).unwrap();
        assert_eq!(whole[1], second[0]);
        assert!(q.forward_quantized(&f0, 1..3).is_err());
    }

    #[test]
    fn bits_parse() {
        let b: BitWidths = "2,2,8".parse().unwrap();
        assert_eq!(b, BitWidths::new(2, 2, 8));
        let b: BitWidths = "4-fp-32".parse().unwrap();
        assert_eq!(b.embedding, None);
        assert_eq!(b.to_string(), "4,32,32");
        assert!("4,4".parse::<BitWidths>().is_err());
    }
}
