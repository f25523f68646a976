//! Analytic gradients against central finite differences in f64.
//!
//! Quantizers are piecewise constant, so their finite-difference oracle is
//! the straight-through surrogate: inside the clip range `x + s·c` with
//! `c = round(x/s) - x/s` frozen at the evaluation point, outside it
//! `s·level`. The composed model is checked against an independent
//! reference forward written here.

use std::cell::RefCell;
use std::collections::BTreeSet;

use mrem::autograd::{Tape, Var};
use mrem::quant::{ste_backward, QuantMode, QuantScheme, QuantSpec};
use mrem::{
    BitWidths, ModelConfig, Network, ParamStore, QuantPlan, QuantizedModel, Result, Tensor, TokenBatch, Transformer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Scalar loss: the op output itself when scalar, otherwise its MSE against a
/// fixed random target.
fn op_loss(tape: &mut Tape<f64>, out: Var) -> Var {
    if tape.value(out).numel() == 1 {
        return tape.sum(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let target = uniform(&mut ChaCha8Rng::seed_from_u64(99), &shape);
    let t = tape.constant(target);
    tape.mse(out, t).unwrap()
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = op_loss(&mut tape, out);
    tape.value(loss).item()
}

fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = op_loss(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map_or(vec![0.0; inputs[k].numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric.push((eval(&plus, build) - eval(&minus, build)) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < REL_TOL, "{name} input {k}: relative error {e:.3e}");
    }
}

pub fn check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |s: &[usize]| uniform(&mut rng, s);
    check_op("linear", vec![r(&[2, 3, 4]), r(&[4, 5])], &|t, v| t.linear(v[0], v[1]));
    check_op("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|t, v| t.matmul(v[0], v[1]));
    check_op("batch_matmul", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], &|t, v| {
        t.batch_matmul(v[0], v[1], false)
    });
    check_op("batch_matmul_t", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], &|t, v| {
        t.batch_matmul(v[0], v[1], true)
    });
    check_op("add", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| t.add(v[0], v[1]));
    check_op("add_bias", vec![r(&[2, 3, 4]), r(&[4])], &|t, v| t.add_bias(v[0], v[1]));
    check_op("scale", vec![r(&[3, 4])], &|t, v| Ok(t.scale(v[0], -0.7)));
    check_op("reshape", vec![r(&[2, 6])], &|t, v| t.reshape(v[0], [3, 4]));
    check_op("gelu", vec![r(&[3, 5])], &|t, v| Ok(t.gelu(v[0])));
    check_op("softmax", vec![r(&[3, 5])], &|t, v| Ok(t.softmax(v[0])));
    check_op("layer_norm", vec![r(&[3, 6]), r(&[6]), r(&[6])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-12)
    });
    check_op("split_heads", vec![r(&[2, 3, 4])], &|t, v| t.split_heads(v[0], 2));
    check_op("merge_heads", vec![r(&[4, 3, 2])], &|t, v| t.merge_heads(v[0], 2));
    check_op("mean_pool", vec![r(&[2, 3, 4])], &|t, v| t.mean_pool(v[0]));
    check_op("gather", vec![r(&[5, 3])], &|t, v| {
        t.gather(v[0], vec![4, 0, 4, 2], &[2, 2])
    });
    check_op("sum", vec![r(&[3, 4])], &|t, v| Ok(t.sum(v[0])));
    check_op("mse", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| t.mse(v[0], v[1]));
    check_op("cross_entropy", vec![r(&[4, 3])], &|t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2])
    });
    check_op("composite", vec![r(&[2, 4, 4]), r(&[4, 4]), r(&[4])], &|t, v| {
        let a = t.linear(v[0], v[1])?;
        let a = t.add_bias(a, v[2])?;
        let g = t.gelu(a);
        let s = t.softmax(g);
        let h = t.split_heads(s, 2)?;
        let p = t.batch_matmul(h, h, true)?;
        t.mean_pool(p)
    });
}

/// Distance of `q` from the nearest rounding boundary `k + 0.5`.
fn boundary_distance(q: f64) -> f64 {
    (q - q.floor() - 0.5).abs()
}

/// Finite difference of `sum(surrogate(x; s))` in `s`, with rounding frozen.
fn surrogate_step_fd(x: &[f64], s: f64, lo: f64, hi: f64) -> f64 {
    let f = |step: f64| -> f64 {
        x.iter()
            .map(|&v| {
                let q = v / s;
                if q < lo {
                    step * lo
                } else if q > hi {
                    step * hi
                } else {
                    v + step * (q.round() - q)
                }
            })
            .sum()
    };
    (f(s + H) - f(s - H)) / (2.0 * H)
}

pub fn check_step_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let bits = rng.gen_range(2..=8);
        let asym = case % 2 == 1;
        let spec = if asym {
            QuantSpec::asymmetric(bits, rng.gen_range(0.05..0.5))
        } else {
            QuantSpec::symmetric(bits, rng.gen_range(0.05..0.5))
        };
        let s = spec.step[0];
        let x: Vec<f64> = (0..16)
            .map(|_| loop {
                let v = rng.gen_range(-4.0..4.0);
                if boundary_distance(v / s) > 1e-3 {
                    break v;
                }
            })
            .collect();
        let xt = Tensor::new(vec![16], x.clone()).unwrap();
        let (gx, gs) = ste_backward(&xt, &spec, &Tensor::ones([16])).unwrap();
        let (lo, hi) = spec.scheme.levels();
        let (lo, hi) = (lo as f64, hi as f64);
        let fd = surrogate_step_fd(&x, s, lo, hi);
        assert!((gs[0] - fd).abs() < 1e-5, "case {case}: {} vs {fd}", gs[0]);

        // Clipped elements have zero input gradient and a true derivative in
        // the step equal to the clip level.
        for (i, &v) in x.iter().enumerate() {
            let q = v / s;
            let clipped = q < lo || q > hi;
            assert_eq!(gx.data()[i], if clipped { 0.0 } else { 1.0 });
            if clipped && (q < lo - 0.5 - 1e-3 || q > hi + 0.5 + 1e-3) {
                let one = |step: f64| {
                    let t = Tensor::new(vec![1], vec![v]).unwrap();
                    let sp = QuantSpec {
                        step: vec![step],
                        ..spec.clone()
                    };
                    mrem::quant::quantize(&t, &sp).unwrap().data()[0]
                };
                let true_fd = (one(s + H) - one(s - H)) / (2.0 * H);
                let level = if q < lo { lo } else { hi };
                assert!((true_fd - level).abs() < 1e-6);
            }
        }
    }
}

pub fn check_tape_fake_quant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bits in [3, 4, 8] {
        let x = uniform(&mut rng, &[3, 4]).map(|v| 2.0 * v);
        let upstream = uniform(&mut rng, &[3, 4]);
        for scheme in [QuantScheme::symmetric(bits), QuantScheme::asymmetric(bits)] {
            let spec = QuantSpec {
                scheme,
                step: vec![0.21],
                learnable: true,
            };
            let (gx, gs) = ste_backward(&x, &spec, &upstream).unwrap();
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let sv = tape.param(Tensor::new(vec![1], vec![0.21]).unwrap());
            let y = tape.fake_quant(xv, sv, scheme).unwrap();
            let u = tape.constant(upstream.clone());
            // d/dy of 0.5·sum((y + u)^2) - 0.5·sum(y^2) - 0.5·sum(u^2) is u.
            let yu = tape.add(y, u).unwrap();
            let zero = tape.constant(Tensor::zeros([3, 4]));
            let n = 12.0;
            let a = tape.mse(yu, zero).unwrap();
            let b = tape.mse(y, zero).unwrap();
            let a = tape.scale(a, n / 2.0);
            let b = tape.scale(b, -n / 2.0);
            let loss = tape.add(a, b).unwrap();
            let grads = tape.backward(loss).unwrap();
            let tx = grads.get(xv).unwrap();
            let ts = grads.get(sv).unwrap();
            assert!(tx.max_abs_diff(&gx).unwrap() < 1e-12);
            assert!((ts.data()[0] - gs[0]).abs() < 1e-12);
        }
    }
}

// Independent reference forward of the quantized encoder.

#[derive(Clone, Copy, PartialEq)]
enum Rounding {
    Exact,
    Record,
    Replay,
}

/// Frozen rounding decision per element: `(clipped, level_or_offset)`.
type Frozen = Vec<(bool, f64)>;

struct Reference<'a> {
    config: ModelConfig,
    plan: QuantPlan,
    p: &'a ParamStore<f64>,
    rounding: Rounding,
    frozen: RefCell<(Vec<Frozen>, usize)>,
}

impl<'a> Reference<'a> {
    fn get(&self, name: &str) -> &'a [f64] {
        self.p.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
    }

    fn frozen_next(&self, make: impl FnOnce() -> Frozen) -> Frozen {
        let mut f = self.frozen.borrow_mut();
        match self.rounding {
            Rounding::Exact => make(),
            Rounding::Record => {
                let v = make();
                f.0.push(v.clone());
                v
            }
            Rounding::Replay => {
                let i = f.1;
                f.1 += 1;
                f.0[i].clone()
            }
        }
    }

    /// Uniform quantization with `steps` indexed by `i % steps.len()`.
    fn uniform_q(&self, x: &[f64], steps: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let frozen = self.frozen_next(|| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let q = v / steps[i % steps.len()];
                    if q < lo {
                        (true, lo)
                    } else if q > hi {
                        (true, hi)
                    } else {
                        (false, q.round() - q)
                    }
                })
                .collect()
        });
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = steps[i % steps.len()];
                match self.rounding {
                    Rounding::Replay => {
                        let (clipped, c) = frozen[i];
                        if clipped {
                            s * c
                        } else {
                            v + s * c
                        }
                    }
                    _ => s * (v / s).round().clamp(lo, hi),
                }
            })
            .collect()
    }

    fn ternary(&self, w: &[f64]) -> Vec<f64> {
        let delta = 0.7 * w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        let big: Vec<f64> = w.iter().filter(|v| v.abs() > delta).map(|v| v.abs()).collect();
        let alpha = if big.is_empty() {
            0.0
        } else {
            big.iter().sum::<f64>() / big.len() as f64
        };
        let exact: Vec<f64> = w
            .iter()
            .map(|&v| if v.abs() > delta { alpha * v.signum() } else { 0.0 })
            .collect();
        let frozen = self.frozen_next(|| w.iter().zip(&exact).map(|(&v, &t)| (false, t - v)).collect());
        match self.rounding {
            Rounding::Replay => w.iter().zip(&frozen).map(|(&v, &(_, c))| v + c).collect(),
            _ => exact,
        }
    }

    fn weight(&self, name: &str, bits: Option<u32>) -> Vec<f64> {
        let w = self.get(name);
        match bits {
            None => w.to_vec(),
            Some(2) => self.ternary(w),
            Some(b) => {
                let q = ((1i64 << (b - 1)) - 1) as f64;
                self.uniform_q(w, self.get(&format!("qspec/{name}")), -q, q)
            }
        }
    }

    fn act(&self, site: &str, x: Vec<f64>, asym: bool) -> Vec<f64> {
        let Some(b) = self.plan.bits.activation else {
            return x;
        };
        let (lo, hi) = if asym {
            (0.0, ((1i64 << b) - 1) as f64)
        } else {
            let q = ((1i64 << (b - 1)) - 1) as f64;
            (-q, q)
        };
        self.uniform_q(&x, self.get(&format!("qspec/{site}")), lo, hi)
    }

    fn affine(&self, x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * dout];
        for r in 0..rows {
            for j in 0..dout {
                let mut acc = b[j];
                for k in 0..din {
                    acc += x[r * din + k] * w[k * dout + j];
                }
                y[r * dout + j] = acc;
            }
        }
        y
    }

    fn layer_norm(&self, x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-12).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        y
    }

    fn layer(&self, l: usize, x: &[f64], batch: usize, seq: usize) -> Vec<f64> {
        let c = &self.config;
        let (d, f, heads) = (c.d_model, c.d_ff, c.heads);
        let hd = d / heads;
        let rows = batch * seq;
        let n = |rest: &str| format!("layer.{l}.{rest}");
        let wb = self.plan.bits.weight;
        let aff = |x: &[f64], name: &str, din, dout| {
            let w = self.weight(&n(&format!("{name}.weight")), wb);
            self.affine(x, rows, &w, self.get(&n(&format!("{name}.bias"))), din, dout)
        };
        let xq = self.act(&n("act.input"), x.to_vec(), false);
        let q = aff(&xq, "attn.query", d, d);
        let k = aff(&xq, "attn.key", d, d);
        let v = aff(&xq, "attn.value", d, d);
        let q = self.act(&n("act.query"), q, false);
        let k = self.act(&n("act.key"), k, false);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let idx = |bb: usize, h: usize, i: usize, j: usize| ((bb * heads + h) * seq + i) * seq + j;
        for bb in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let row: Vec<f64> = (0..seq)
                        .map(|j| {
                            (0..hd)
                                .map(|e| q[(bb * seq + i) * d + h * hd + e] * k[(bb * seq + j) * d + h * hd + e])
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..seq {
                        probs[idx(bb, h, i, j)] = (row[j] - m).exp() / z;
                    }
                }
            }
        }
        let probs = self.act(&n("act.probs"), probs, true);
        let v = self.act(&n("act.value"), v, false);
        let mut ctx = vec![0.0; rows * d];
        for bb in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    for e in 0..hd {
                        ctx[(bb * seq + i) * d + h * hd + e] = (0..seq)
                            .map(|j| probs[idx(bb, h, i, j)] * v[(bb * seq + j) * d + h * hd + e])
                            .sum();
                    }
                }
            }
        }
        let ctx = self.act(&n("act.context"), ctx, false);
        let o = aff(&ctx, "attn.output", d, d);
        let res: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h1 = self.layer_norm(&res, self.get(&n("attn_norm.gamma")), self.get(&n("attn_norm.beta")), d);
        let hq = self.act(&n("act.ffn_input"), h1.clone(), false);
        let up = aff(&hq, "ffn.up", d, f);
        let g: Vec<f64> = up
            .iter()
            .map(|&u| u * 0.5 * (1.0 + libm::erf(u / std::f64::consts::SQRT_2)))
            .collect();
        let g = self.act(&n("act.gelu"), g, true);
        let down = aff(&g, "ffn.down", f, d);
        let res: Vec<f64> = h1.iter().zip(&down).map(|(a, b)| a + b).collect();
        self.layer_norm(&res, self.get(&n("ffn_norm.gamma")), self.get(&n("ffn_norm.beta")), d)
    }

    fn logits(&self, tokens: &TokenBatch) -> Vec<f64> {
        let c = &self.config;
        let d = c.d_model;
        let table = self.weight("embed.token", self.plan.bits.embedding);
        let pos = self.get("embed.position");
        let mut h = Vec::with_capacity(tokens.ids.len() * d);
        for (i, &t) in tokens.ids.iter().enumerate() {
            let p = i % tokens.seq;
            h.extend((0..d).map(|j| table[t * d + j] + pos[p * d + j]));
        }
        for l in 0..c.layers {
            h = self.layer(l, &h, tokens.batch, tokens.seq);
        }
        let mut pooled = vec![0.0; tokens.batch * d];
        for b in 0..tokens.batch {
            for s in 0..tokens.seq {
                for j in 0..d {
                    pooled[b * d + j] += h[(b * tokens.seq + s) * d + j] / tokens.seq as f64;
                }
            }
        }
        self.affine(
            &pooled,
            tokens.batch,
            self.get("head.weight"),
            self.get("head.bias"),
            d,
            c.num_classes,
        )
    }

    fn logit_mse(&self, tokens: &TokenBatch, target: &[f64]) -> f64 {
        self.frozen.borrow_mut().1 = 0;
        let z = self.logits(tokens);
        z.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab: 12,
        max_seq_len: 4,
        num_classes: 3,
    }
}

fn quantized_model(plan: QuantPlan, seed: u64) -> (QuantizedModel<f64>, TokenBatch, Vec<f64>) {
    let config = tiny_config();
    let mut fp = Transformer::<f64>::new_random(config, seed).unwrap();
    // Non-trivial biases and norms so that their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names: Vec<String> = fp.params.names().map(str::to_owned).collect();
    for name in names {
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in fp.params.get_mut(&name).unwrap().data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let ids = (0..2 * 4).map(|_| rng.gen_range(0..config.vocab)).collect();
    let tokens = TokenBatch::new(2, 4, ids).unwrap();
    let q = QuantizedModel::from_fp(&fp, plan, &tokens).unwrap();
    let target = (0..2 * config.num_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (q, tokens, target)
}

fn check_composed_model(plan: QuantPlan, seed: u64) {
    let (q, tokens, target) = quantized_model(plan, seed);
    fn reference(plan: QuantPlan, p: &ParamStore<f64>, rounding: Rounding) -> Reference<'_> {
        Reference {
            config: tiny_config(),
            plan,
            p,
            rounding,
            frozen: RefCell::new((Vec::new(), 0)),
        }
    }

    // The reference forward agrees with the library's.
    let exact = reference(plan, &q.params, Rounding::Exact).logits(&tokens);
    let lib = q.forward(&tokens).unwrap().logits;
    let diff = exact
        .iter()
        .zip(lib.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "reference forward differs by {diff}");

    let names: BTreeSet<String> = q.params.names().map(str::to_owned).collect();
    let (loss, grads) = q
        .logit_mse_gradients(
            &tokens,
            &Tensor::new(lib.shape().to_vec(), target.clone()).unwrap(),
            &names,
        )
        .unwrap();

    let rec = reference(plan, &q.params, Rounding::Record);
    let base = rec.logit_mse(&tokens, &target);
    assert!((base - loss).abs() < 1e-9);
    let frozen = rec.frozen.into_inner().0;

    for name in &names {
        let t = q.params.get(name).unwrap();
        let analytic = grads.get(name).map_or(vec![0.0; t.numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            let at = |delta: f64| {
                let mut p = q.params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                let r = Reference {
                    frozen: RefCell::new((frozen.clone(), 0)),
                    ..reference(plan, &p, Rounding::Replay)
                };
                r.logit_mse(&tokens, &target)
            };
            numeric.push((at(H) - at(-H)) / (2.0 * H));
        }
        if name.starts_with("qspec/") {
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-5, "{name}: step gradient {a} vs {n}");
            }
        } else {
            let e = rel_err(&analytic, &numeric);
            assert!(e < REL_TOL, "{name}: relative error {e:.3e} ({plan:?})");
        }
    }
}

pub fn check_quantized_models() {
    check_composed_model(QuantPlan::new(BitWidths::new(4, 4, 8)), 1);
    check_composed_model(QuantPlan::new(BitWidths::new(2, 2, 4)), 2);
    check_composed_model(
        QuantPlan {
            bits: BitWidths::new(4, 3, 6),
            per_channel: true,
        },
        3,
    );
}

pub fn check_full_precision_model() {
    check_composed_model(QuantPlan::new(BitWidths::disabled()), 4);
}

pub fn check_ternary_sites() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::new(vec![4], vec![0.9, -0.05, 0.4, -1.2]).unwrap());
    let t = tape.ternary(w);
    let loss = tape.sum(t);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    let spec = QuantSpec::<f64> {
        scheme: QuantScheme::new(2, QuantMode::Ternary, mrem::quant::Granularity::PerTensor).unwrap(),
        step: vec![],
        learnable: false,
    };
    let up = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
    let (gx, gs) = ste_backward(&Tensor::new(vec![2], vec![5.0, 0.0]).unwrap(), &spec, &up).unwrap();
    assert_eq!(gx, up);
    assert!(gs.is_empty());
}
