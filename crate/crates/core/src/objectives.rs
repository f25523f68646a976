//! Reconstruction objectives, teacher forcing and the single-module
//! training step shared by the sequential and pipelined trainers.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{Graph, Network, QuantizedModel, TokenBatch, Transformer};
use crate::optim::{linear_lr, OptimizerState};
use crate::partition::ModuleView;
use crate::tensor::{Scalar, Tensor};

/// Mean squared error between a quantized output and its full-precision
/// counterpart.
pub fn rem_loss<T: Scalar>(w_hat_out: &Tensor<T>, fp_out: &Tensor<T>) -> Result<T> {
    let diff = w_hat_out.zip_map(fp_out, "rem_loss", |a, b| (a - b) * (a - b))?;
    Ok(diff.mean())
}

/// Sum over pairs of the per-pair mean squared error.
pub fn mrem_loss<T: Scalar>(fhat: &[Tensor<T>], f: &[Tensor<T>]) -> Result<T> {
    if fhat.len() != f.len() {
        return Err(Error::contract(format!(
            "mrem_loss over {} quantized and {} full-precision outputs",
            fhat.len(),
            f.len()
        )));
    }
    fhat.iter()
        .zip(f)
        .try_fold(T::zero(), |acc, (a, b)| Ok(acc + rem_loss(a, b)?))
}

/// `max(1 − t/T0, 0)`; always zero when `T0 = 0`.
pub fn lambda_schedule(t: usize, t0: usize) -> f64 {
    if t0 == 0 {
        return 0.0;
    }
    (1.0 - t as f64 / t0 as f64).max(0.0)
}

/// `λ·f + (1 − λ)·f̂`.
pub fn teacher_force<T: Scalar>(f: &Tensor<T>, fhat: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "teacher-forcing weight {lambda} outside [0, 1]"
        )));
    }
    if lambda == 1.0 {
        f.zip_map(fhat, "teacher_force", |a, _| a)
    } else if lambda == 0.0 {
        f.zip_map(fhat, "teacher_force", |_, b| b)
    } else {
        let (l, m) = (T::lit(lambda), T::lit(1.0 - lambda));
        f.zip_map(fhat, "teacher_force", |a, b| l * a + m * b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    /// Optimizer steps per module.
    pub total_steps: usize,
    /// Teacher forcing is active for `t < teacher_steps`.
    pub teacher_steps: usize,
    pub lr: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, teacher_fraction: f64, lr: f64) -> Result<Self> {
        if total_steps == 0 || !(0.0..=1.0).contains(&teacher_fraction) || lr <= 0.0 {
            return Err(Error::contract(format!(
                "invalid schedule: T={total_steps}, T0 fraction={teacher_fraction}, lr={lr}"
            )));
        }
        Ok(Self {
            total_steps,
            teacher_steps: (teacher_fraction * total_steps as f64).round() as usize,
            lr,
        })
    }

    pub fn lambda(&self, t: usize) -> f64 {
        if t < self.teacher_steps {
            lambda_schedule(t, self.teacher_steps)
        } else {
            0.0
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        linear_lr(t, self.total_steps, self.lr)
    }
}

/// What a module consumes: token ids for the first module, otherwise a
/// paired full-precision / quantized hidden state from the same batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleInput<T = f32> {
    Tokens(TokenBatch),
    Hidden { f: Tensor<T>, fhat: Tensor<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T = f32> {
    pub f_out: Tensor<T>,
    pub fhat_out: Tensor<T>,
    /// Loss before the update.
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
}

/// Full-precision targets of a module: `f_0` for the first module, every
/// layer output, and the logits for the last module.
pub fn module_targets<T: Scalar>(
    fp: &Transformer<T>,
    view: &ModuleView,
    input: &ModuleInput<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut targets = Vec::new();
    let start = match input {
        ModuleInput::Tokens(tokens) => {
            if !view.is_first() {
                return Err(Error::contract("token input given to a module without the embedding"));
            }
            targets.push(fp.embed(tokens)?);
            targets[0].clone()
        }
        ModuleInput::Hidden { f, .. } => {
            if view.is_first() {
                return Err(Error::contract("hidden-state input given to the first module"));
            }
            f.clone()
        }
    };
    let outs = fp.forward_layers(&start, view.layers.clone())?;
    targets.extend(outs);
    if view.is_last() {
        let logits = fp.classify(targets.last().unwrap())?;
        targets.push(logits);
    }
    Ok(targets)
}

struct ModuleGraph<'a, T: Scalar> {
    graph: Graph<'a, T>,
    loss: Var,
    out: Var,
}

fn build_module_graph<'a, T: Scalar>(
    q: &'a QuantizedModel<T>,
    view: &'a ModuleView,
    input: &ModuleInput<T>,
    lambda: f64,
    targets: &[Tensor<T>],
) -> Result<ModuleGraph<'a, T>> {
    let mut g = Graph::new(&q.config, &q.params, Some(q.plan)).with_trainable(&view.trainable);
    let mut outs = Vec::new();
    let start = match input {
        ModuleInput::Tokens(tokens) => {
            let f0 = g.embed(tokens)?;
            outs.push(f0);
            f0
        }
        ModuleInput::Hidden { f, fhat } => {
            let mixed = if lambda > 0.0 {
                teacher_force(f, fhat, lambda)?
            } else {
                fhat.clone()
            };
            g.input(mixed)
        }
    };
    let layers = g.layers(start, view.layers.clone())?;
    outs.extend(&layers);
    let out = *outs.last().unwrap_or(&start);
    if view.is_last() {
        outs.push(g.head(out)?);
    }
    if outs.len() != targets.len() {
        return Err(Error::contract("module outputs and targets differ in count"));
    }
    let mut loss = None;
    for (&o, t) in outs.iter().zip(targets) {
        let target = g.input(t.clone());
        let term = g.tape.mse(o, target)?;
        loss = Some(match loss {
            Some(acc) => g.tape.add(acc, term)?,
            None => term,
        });
    }
    let loss = loss.ok_or_else(|| Error::contract("module has no outputs"))?;
    Ok(ModuleGraph { graph: g, loss, out })
}

/// Module reconstruction loss at teacher-forcing weight `lambda`, without
/// updating anything.
pub fn module_loss<T: Scalar>(
    fp: &Transformer<T>,
    q: &QuantizedModel<T>,
    view: &ModuleView,
    input: &ModuleInput<T>,
    lambda: f64,
) -> Result<f64> {
    let targets = module_targets(fp, view, input)?;
    let mg = build_module_graph(q, view, input, lambda, &targets)?;
    Ok(mg.graph.tape.value(mg.loss).item().to_f64())
}

/// One optimizer step on module `view` of `q`.
///
/// While `t` is inside the teacher-forcing horizon, the quantized path
/// consumes `λ_t·f + (1 − λ_t)·f̂`; afterwards it consumes `f̂` alone. Only
/// parameters in `view.trainable` change.
pub fn mrem_step<T: Scalar>(
    fp: &Transformer<T>,
    q: &mut QuantizedModel<T>,
    view: &ModuleView,
    input: &ModuleInput<T>,
    t: usize,
    sched: &Schedule,
    opt: &mut OptimizerState<T>,
) -> Result<StepOutput<T>> {
    let lambda = sched.lambda(t);
    let lr = sched.lr_at(t);
    let targets = module_targets(fp, view, input)?;
    let (grads, loss, fhat_out) = {
        let mg = build_module_graph(q, view, input, lambda, &targets)?;
        let loss = mg.graph.tape.value(mg.loss).item().to_f64();
        if !loss.is_finite() {
            return Err(Error::Training {
                param: format!("module {}", view.index),
                reason: format!("non-finite loss at step {t}"),
            });
        }
        let grads = mg.graph.gradients_for(mg.loss)?;
        (grads, loss, mg.graph.tape.value(mg.out).clone())
    };
    opt.apply(&mut q.params, &grads, lr)?;
    let f_out = targets[if view.is_last() {
        targets.len() - 2
    } else {
        targets.len() - 1
    }]
    .clone();
    Ok(StepOutput {
        f_out,
        fhat_out,
        loss,
        lambda,
        lr,
    })
}
