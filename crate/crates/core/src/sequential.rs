//! Single-worker trainers: full-precision fine-tuning, greedy per-matmul
//! reconstruction (REM), sequential module-wise reconstruction (MREM-S) and
//! end-to-end quantization-aware training (QAT).

use std::collections::BTreeSet;
use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::data::{CalibrationSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricSink};
use crate::model::{names, Graph, LayerTaps, ModelConfig, Network, QuantPlan, QuantizedModel, Transformer};
use crate::objectives::{mrem_step, ModuleInput, Schedule};
use crate::optim::{linear_lr, AdamWConfig, OptimizerState};
use crate::parallel::worker_rng;
use crate::params::QSPEC_PREFIX;
use crate::partition::{module_views, partition_layers, Partition};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps per module.
    pub steps: usize,
    /// Optimizer steps per REM unit; `None` splits the MREM budget
    /// (`modules × steps`) evenly over the active units.
    pub rem_steps: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub plan: QuantPlan,
    pub modules: usize,
    /// Input-queue capacity for the pipelined trainer.
    pub queue_capacity: usize,
    /// Fraction of `steps` with teacher forcing.
    pub teacher_fraction: f64,
    /// Apply the teacher-forcing schedule in MREM-S too.
    pub sequential_teacher_forcing: bool,
    /// Calibration examples used to initialize activation step sizes.
    pub init_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            rem_steps: None,
            lr: 1e-4,
            batch_size: 32,
            plan: QuantPlan::default(),
            modules: 4,
            queue_capacity: 4,
            teacher_fraction: 0.4,
            sequential_teacher_forcing: true,
            init_examples: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.steps,
            self.rem_steps.unwrap_or(1),
            self.batch_size,
            self.modules,
            self.queue_capacity,
            self.init_examples,
        ];
        if positive.contains(&0) || self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.teacher_fraction)
        {
            return Err(Error::contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.steps, self.teacher_fraction, self.lr)
    }

    pub fn rem_steps_per_unit(&self, config: &ModelConfig) -> usize {
        self.rem_steps.unwrap_or_else(|| {
            let units = active_rem_units(config, self.plan).max(1);
            (self.modules * self.steps / units).max(1)
        })
    }

    pub fn partition(&self, layers: usize) -> Result<Partition> {
        partition_layers(layers, self.modules)
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Initial quantized model: latent weights copied from `fp`, step sizes
/// initialized from the first `cfg.init_examples` calibration examples.
pub fn init_quantized<T: Scalar>(
    fp: &Transformer<T>,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
) -> Result<QuantizedModel<T>> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    QuantizedModel::from_fp(fp, cfg.plan, &calib.head(cfg.init_examples)?)
}

/// Paired full-precision / quantized hidden states for every calibration
/// example at one layer boundary.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HiddenCache<T> {
    seq: usize,
    width: usize,
    f: Vec<T>,
    fhat: Vec<T>,
}

const CACHE_CHUNK: usize = 256;

impl<T: Scalar> HiddenCache<T> {
    fn row_len(&self) -> usize {
        self.seq * self.width
    }

    pub fn gather(&self, rows: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let n = self.row_len();
        let pick = |src: &[T]| -> Vec<T> {
            rows.iter()
                .flat_map(|&r| src[r * n..(r + 1) * n].iter().copied())
                .collect()
        };
        let shape = vec![rows.len(), self.seq, self.width];
        (
            Tensor::from_parts(shape.clone(), pick(&self.f)),
            Tensor::from_parts(shape, pick(&self.fhat)),
        )
    }

    /// Embedding outputs of both models.
    pub fn embeddings(fp: &Transformer<T>, q: &QuantizedModel<T>, calib: &CalibrationSet) -> Result<Self> {
        let mut cache = Self {
            seq: calib.seq_len,
            width: fp.config.d_model,
            f: Vec::new(),
            fhat: Vec::new(),
        };
        for start in (0..calib.len()).step_by(CACHE_CHUNK) {
            let rows: Vec<usize> = (start..(start + CACHE_CHUNK).min(calib.len())).collect();
            let tokens = calib.batch(&rows)?;
            cache.f.extend(fp.embed(&tokens)?.into_data());
            cache.fhat.extend(q.embed(&tokens)?.into_data());
        }
        Ok(cache)
    }

    /// Pushes both sides through `layers`.
    pub fn advance(&mut self, fp: &Transformer<T>, q: &QuantizedModel<T>, layers: Range<usize>) -> Result<()> {
        if layers.is_empty() {
            return Ok(());
        }
        let n = self.row_len();
        let total = self.f.len() / n;
        for start in (0..total).step_by(CACHE_CHUNK) {
            let rows: Vec<usize> = (start..(start + CACHE_CHUNK).min(total)).collect();
            let (f, fhat) = self.gather(&rows);
            let f = fp.forward_layers(&f, layers.clone())?.pop().unwrap();
            let fhat = q.forward_layers(&fhat, layers.clone())?.pop().unwrap();
            self.f[start * n..start * n + f.numel()].copy_from_slice(f.data());
            self.fhat[start * n..start * n + fhat.numel()].copy_from_slice(fhat.data());
        }
        Ok(())
    }
}

/// Sequential MREM: modules are trained one after another, each for
/// `cfg.steps` steps, on inputs produced by the already trained quantized
/// prefix and the full-precision prefix.
pub fn train_mrem_s<T: Scalar>(
    fp: &Transformer<T>,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<QuantizedModel<T>> {
    let mut q = init_quantized(fp, calib, cfg)?;
    let partition = cfg.partition(fp.config.layers)?;
    let views = module_views(&q.params, &partition)?;
    let mut sched = cfg.schedule()?;
    if !cfg.sequential_teacher_forcing {
        sched.teacher_steps = 0;
    }
    let start = Instant::now();
    let mut cache: Option<HiddenCache<T>> = None;
    let mut tick = 0u64;
    for view in &views {
        let mut rng = worker_rng(cfg.seed, view.index);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        for t in 0..sched.total_steps {
            let rows = calib.sample_rows(&mut rng, cfg.batch_size);
            let input = match &cache {
                None => ModuleInput::Tokens(calib.batch(&rows)?),
                Some(c) => {
                    let (f, fhat) = c.gather(&rows);
                    ModuleInput::Hidden { f, fhat }
                }
            };
            let out = mrem_step(fp, &mut q, view, &input, t, &sched, &mut opt)?;
            tick += 1;
            sink.record(&MetricRecord {
                tick,
                step: t,
                module: view.index,
                loss: out.loss,
                lambda: out.lambda,
                lr: out.lr,
                wall_ms: elapsed_ms(start),
            })?;
        }
        if !view.is_last() {
            match &mut cache {
                None => {
                    let mut c = HiddenCache::embeddings(fp, &q, calib)?;
                    c.advance(fp, &q, view.layers.clone())?;
                    cache = Some(c);
                }
                Some(c) => c.advance(fp, &q, view.layers.clone())?,
            }
        }
    }
    Ok(q)
}

/// Matrix multiplication whose output a REM unit reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemTarget {
    Embedding,
    Query,
    Key,
    Value,
    Scores,
    Context,
    Output,
    FfnUp,
    FfnDown,
}

impl RemTarget {
    fn tap(self, taps: &LayerTaps) -> Var {
        match self {
            Self::Query => taps.query,
            Self::Key => taps.key,
            Self::Value => taps.value,
            Self::Scores => taps.scores,
            Self::Context => taps.context,
            Self::Output => taps.output,
            Self::FfnUp => taps.ffn_up,
            Self::FfnDown => taps.ffn_down,
            Self::Embedding => unreachable!("embedding has no layer tap"),
        }
    }
}

/// One greedy REM stage: a matrix multiplication, the quantization sites
/// feeding it, and the layer it lives in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemUnit {
    pub layer: Option<usize>,
    pub target: RemTarget,
    /// Quantization sites trained by this unit, in forward order.
    pub sites: Vec<String>,
}

/// REM units in forward order. Their concatenated sites equal
/// [`crate::model::placement_sites`].
pub fn rem_units(config: &ModelConfig) -> Vec<RemUnit> {
    use RemTarget::*;
    let layer_units: [(RemTarget, &[&str]); 8] = [
        (Query, &["act.input", "attn.query.weight"]),
        (Key, &["attn.key.weight"]),
        (Value, &["attn.value.weight"]),
        (Scores, &["act.query", "act.key"]),
        (Context, &["act.probs", "act.value"]),
        (Output, &["act.context", "attn.output.weight"]),
        (FfnUp, &["act.ffn_input", "ffn.up.weight"]),
        (FfnDown, &["act.gelu", "ffn.down.weight"]),
    ];
    let mut units = vec![RemUnit {
        layer: None,
        target: Embedding,
        sites: vec![names::TOKEN_EMBED.to_string()],
    }];
    for l in 0..config.layers {
        for (target, sites) in layer_units {
            units.push(RemUnit {
                layer: Some(l),
                target,
                sites: sites.iter().map(|s| names::layer(l, s)).collect(),
            });
        }
    }
    units
}

/// Parameters REM trains for `unit`: the latent weight when weights at that
/// site are quantized, plus every step size that exists for its sites.
fn rem_trainable<T: Scalar>(q: &QuantizedModel<T>, unit: &RemUnit) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for site in &unit.sites {
        let step = format!("{QSPEC_PREFIX}{site}");
        if q.params.contains(&step) {
            set.insert(step);
        }
        let is_weight = site.ends_with(".weight") || site == names::TOKEN_EMBED;
        let bits = if site == names::TOKEN_EMBED {
            q.plan.bits.embedding
        } else {
            q.plan.bits.weight
        };
        if is_weight && bits.is_some() {
            set.insert(site.clone());
        }
    }
    set
}

/// Greedy per-matmul reconstruction. Units are trained in forward order for
/// `cfg.rem_steps_per_unit` steps each; the unit's layer input comes from the
/// quantized path with every earlier unit already trained and frozen.
pub fn train_rem<T: Scalar>(
    fp: &Transformer<T>,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<QuantizedModel<T>> {
    let mut q = init_quantized(fp, calib, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut tick = 0u64;
    let mut cache: Option<HiddenCache<T>> = None;
    let mut cached_layer = 0;
    let steps = cfg.rem_steps_per_unit(&fp.config);
    for (index, unit) in rem_units(&fp.config).iter().enumerate() {
        if let Some(l) = unit.layer {
            if cache.is_none() {
                cache = Some(HiddenCache::embeddings(fp, &q, calib)?);
            }
            let c = cache.as_mut().unwrap();
            c.advance(fp, &q, cached_layer..l)?;
            cached_layer = l;
        }
        let trainable = rem_trainable(&q, unit);
        if trainable.is_empty() {
            continue;
        }
        let mut opt = OptimizerState::new(AdamWConfig::default());
        for t in 0..steps {
            let rows = calib.sample_rows(&mut rng, cfg.batch_size);
            let lr = linear_lr(t, steps, cfg.lr);
            let (grads, loss) = {
                let mut gf = Graph::new(&fp.config, &fp.params, None);
                let mut gq = Graph::new(&q.config, &q.params, Some(q.plan)).with_trainable(&trainable);
                let (out_q, target) = match unit.layer {
                    None => {
                        let tokens = calib.batch(&rows)?;
                        let ef = gf.embed(&tokens)?;
                        (gq.embed(&tokens)?, gf.tape.value(ef).clone())
                    }
                    Some(l) => {
                        let (xf, xq) = cache.as_ref().unwrap().gather(&rows);
                        let xf = gf.input(xf);
                        let taps_f = gf.layer(l, xf)?.1;
                        let xq = gq.input(xq);
                        let taps_q = gq.layer(l, xq)?.1;
                        (
                            unit.target.tap(&taps_q),
                            gf.tape.value(unit.target.tap(&taps_f)).clone(),
                        )
                    }
                };
                let target = gq.input(target);
                let loss = gq.tape.mse(out_q, target)?;
                let value = gq.tape.value(loss).item().to_f64();
                if !value.is_finite() {
                    return Err(Error::Training {
                        param: unit.sites.join("+"),
                        reason: format!("non-finite loss at step {t}"),
                    });
                }
                (gq.gradients_for(loss)?, value)
            };
            opt.apply(&mut q.params, &grads, lr)?;
            tick += 1;
            sink.record(&MetricRecord {
                tick,
                step: t,
                module: index,
                loss,
                lambda: 0.0,
                lr,
                wall_ms: elapsed_ms(start),
            })?;
        }
    }
    Ok(q)
}

/// Number of REM units that have something to train under `plan`.
pub fn active_rem_units(config: &ModelConfig, plan: QuantPlan) -> usize {
    if plan.bits.is_disabled() {
        return 0;
    }
    rem_units(config)
        .iter()
        .filter(|u| {
            let has_weight = u.sites.iter().any(|s| s.ends_with(".weight"));
            match u.target {
                RemTarget::Embedding => plan.bits.embedding.is_some(),
                _ => plan.bits.activation.is_some() || (has_weight && plan.bits.weight.is_some()),
            }
        })
        .count()
}

/// End-to-end training of every latent weight and step size on the full
/// training split, matching the full-precision logits. Runs
/// `cfg.steps × cfg.modules` steps so the optimizer budget equals MREM's.
pub fn train_qat<T: Scalar>(
    fp: &Transformer<T>,
    train: &Split,
    cfg: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<QuantizedModel<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    let init_rows: Vec<usize> = (0..cfg.init_examples.min(train.len())).collect();
    let mut q = QuantizedModel::from_fp(fp, cfg.plan, &train.batch(&init_rows)?.0)?;
    let trainable = q.params.param_names();
    let total = cfg.steps * cfg.modules;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(AdamWConfig::default());
    let start = Instant::now();
    for t in 0..total {
        let rows: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..train.len()))
            .collect();
        let (tokens, _) = train.batch(&rows)?;
        let target = fp.forward(&tokens)?.logits;
        let lr = linear_lr(t, total, cfg.lr);
        let (grads, loss) = {
            let mut g = Graph::new(&q.config, &q.params, Some(q.plan)).with_trainable(&trainable);
            let f0 = g.embed(&tokens)?;
            let outs = g.layers(f0, 0..q.config.layers)?;
            let logits = g.head(*outs.last().unwrap_or(&f0))?;
            let target = g.input(target);
            let loss = g.tape.mse(logits, target)?;
            let value = g.tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    param: "qat".into(),
                    reason: format!("non-finite loss at step {t}"),
                });
            }
            (g.gradients_for(loss)?, value)
        };
        opt.apply(&mut q.params, &grads, lr)?;
        sink.record(&MetricRecord {
            tick: t as u64 + 1,
            step: t,
            module: 0,
            loss,
            lambda: 0.0,
            lr,
            wall_ms: elapsed_ms(start),
        })?;
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Linear warm-up length before the linear decay.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            batch_size: 32,
            warmup_steps: 100,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Cross-entropy fine-tuning of a randomly initialized model.
pub fn train_fp<T: Scalar>(
    config: ModelConfig,
    train: &Split,
    cfg: &FpTrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<Transformer<T>> {
    if train.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::contract("train_fp needs data, steps and a batch size"));
    }
    let mut model = Transformer::<T>::new_random(config, cfg.seed)?;
    let trainable = model.params.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let start = Instant::now();
    for t in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..train.len()))
            .collect();
        let (tokens, labels) = train.batch(&rows)?;
        let lr = if t < cfg.warmup_steps {
            cfg.lr * (t + 1) as f64 / cfg.warmup_steps as f64
        } else {
            linear_lr(t - cfg.warmup_steps, cfg.steps - cfg.warmup_steps, cfg.lr)
        };
        let (grads, loss) = {
            let mut g = Graph::new(&model.config, &model.params, None).with_trainable(&trainable);
            let f0 = g.embed(&tokens)?;
            let outs = g.layers(f0, 0..model.config.layers)?;
            let logits = g.head(*outs.last().unwrap_or(&f0))?;
            let loss = g.tape.cross_entropy(logits, &labels)?;
            let value = g.tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    param: "fp".into(),
                    reason: format!("non-finite loss at step {t}"),
                });
            }
            (g.gradients_for(loss)?, value)
        };
        opt.apply(&mut model.params, &grads, lr)?;
        sink.record(&MetricRecord {
            tick: t as u64 + 1,
            step: t,
            module: 0,
            loss,
            lambda: 0.0,
            lr,
            wall_ms: elapsed_ms(start),
        })?;
    }
    Ok(model)
}
