//! Pipelined MREM: one worker per module, bounded stale input queues
//! between neighbouring modules, and closed-form tick accounting.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricSink};
use crate::model::{Network, QuantizedModel, Transformer};
use crate::objectives::{mrem_step, ModuleInput, Schedule, StepOutput};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::partition::{module_views, ModuleView};
use crate::sequential::{elapsed_ms, init_quantized, TrainConfig};
use crate::tensor::{Scalar, Tensor};

/// A paired boundary activation. `f` and `fhat` come from the same batch.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry<T = f32> {
    pub f: Tensor<T>,
    pub fhat: Tensor<T>,
    pub batch_id: u64,
    /// Calibration rows of the batch.
    pub rows: Vec<usize>,
    pub stamp: u64,
}

/// Bounded FIFO of the most recent boundary activations.
#[derive(Clone, Debug)]
pub struct BoundaryQueue<T = f32> {
    capacity: usize,
    entries: VecDeque<QueueEntry<T>>,
}

impl<T: Scalar> BoundaryQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("queue capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `entry`, evicting the oldest entry when over capacity.
    pub fn push(&mut self, entry: QueueEntry<T>) {
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Uniform draw with replacement; the queue is unchanged.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<&QueueEntry<T>> {
        if self.entries.is_empty() {
            return Err(Error::Runtime("sampled an empty input queue before warm-up".into()));
        }
        Ok(&self.entries[rng.gen_range(0..self.entries.len())])
    }

    pub fn stamps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.stamp).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry<T>> {
        self.entries.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParallelMode {
    /// All workers advance one step per global tick against the previous
    /// tick's queue contents. Bit-reproducible.
    Lockstep,
    /// One OS thread per worker with mutex-guarded queues.
    Threads,
}

impl std::str::FromStr for ParallelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lockstep" => Ok(Self::Lockstep),
            "threads" => Ok(Self::Threads),
            _ => Err(Error::Usage(format!("unknown parallel mode `{s}`"))),
        }
    }
}

/// Per-step history of one worker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerReport {
    pub module: usize,
    pub records: Vec<MetricRecord>,
}

/// Where a worker's input came from on one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub module: usize,
    pub batch_id: u64,
    pub stamp: u64,
    pub staleness: u64,
}

/// Splits a model into per-module parameter slices.
pub fn split_modules<T: Scalar>(q: &QuantizedModel<T>, views: &[ModuleView]) -> Vec<QuantizedModel<T>> {
    let mut rest = q.params.clone();
    views
        .iter()
        .map(|v| QuantizedModel {
            config: q.config,
            plan: q.plan,
            params: rest.split_off(&v.trainable),
        })
        .collect()
}

pub fn merge_modules<T: Scalar>(parts: Vec<QuantizedModel<T>>) -> Result<QuantizedModel<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("no modules to merge"))?;
    let (config, plan) = (first.config, first.plan);
    let mut params = ParamStore::new();
    for p in parts {
        params.merge(p.params);
    }
    Ok(QuantizedModel { config, plan, params })
}

/// Plain forward of one module on an input pair, without training.
fn module_forward<T: Scalar>(
    fp: &Transformer<T>,
    q: &QuantizedModel<T>,
    view: &ModuleView,
    input: &ModuleInput<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (f, fhat) = match input {
        ModuleInput::Tokens(tokens) => (fp.embed(tokens)?, q.embed(tokens)?),
        ModuleInput::Hidden { f, fhat } => (f.clone(), fhat.clone()),
    };
    if view.layers.is_empty() {
        return Ok((f, fhat));
    }
    let f = fp.forward_layers(&f, view.layers.clone())?.pop().unwrap();
    let fhat = q.forward_layers(&fhat, view.layers.clone())?.pop().unwrap();
    Ok((f, fhat))
}

/// Runs `t0` sequential passes through every module, filling each boundary
/// queue with stamps `1..=t0`. Returns the queues and the number of module
/// forwards performed.
pub fn warmup_fill<T: Scalar>(
    fp: &Transformer<T>,
    modules: &[QuantizedModel<T>],
    views: &[ModuleView],
    calib: &CalibrationSet,
    t0: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<BoundaryQueue<T>>, usize)> {
    let mut queues = (1..views.len())
        .map(|_| BoundaryQueue::new(t0))
        .collect::<Result<Vec<_>>>()?;
    let mut forwards = 0;
    for pass in 1..=t0 as u64 {
        let rows = calib.sample_rows(rng, batch_size);
        let mut input = ModuleInput::Tokens(calib.batch(&rows)?);
        for (n, view) in views.iter().enumerate() {
            let (f, fhat) = module_forward(fp, &modules[n], view, &input)?;
            forwards += 1;
            if n + 1 < views.len() {
                queues[n].push(QueueEntry {
                    f: f.clone(),
                    fhat: fhat.clone(),
                    batch_id: pass,
                    rows: rows.clone(),
                    stamp: pass,
                });
            }
            input = ModuleInput::Hidden { f, fhat };
        }
    }
    Ok((queues, forwards))
}

/// Row-sampling stream of module `module`, shared by the sequential and
/// pipelined trainers.
pub(crate) fn worker_rng(seed: u64, module: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(module as u64 + 1);
    rng
}

/// Deterministic pipelined trainer that can be stepped one global tick at a
/// time.
pub struct LockstepRunner<'a, T: Scalar> {
    fp: &'a Transformer<T>,
    calib: &'a CalibrationSet,
    batch_size: usize,
    sched: Schedule,
    views: Vec<ModuleView>,
    modules: Vec<QuantizedModel<T>>,
    opts: Vec<OptimizerState<T>>,
    queues: Vec<BoundaryQueue<T>>,
    rngs: Vec<ChaCha8Rng>,
    t0: u64,
    tick: usize,
    next_batch_id: u64,
    warmup_forwards: usize,
    last_samples: Vec<SampleInfo>,
    reports: Vec<WorkerReport>,
    start: Instant,
}

impl<'a, T: Scalar> LockstepRunner<'a, T> {
    /// Initializes the quantized model, splits it per module and runs the
    /// warm-up fill.
    pub fn new(fp: &'a Transformer<T>, calib: &'a CalibrationSet, cfg: &TrainConfig) -> Result<Self> {
        let q = init_quantized(fp, calib, cfg)?;
        let views = module_views(&q.params, &cfg.partition(fp.config.layers)?)?;
        let modules = split_modules(&q, &views);
        let rngs: Vec<ChaCha8Rng> = (0..views.len()).map(|n| worker_rng(cfg.seed, n)).collect();
        let (queues, warmup_forwards) = if views.len() > 1 {
            let mut warm = ChaCha8Rng::seed_from_u64(cfg.seed);
            warmup_fill(
                fp,
                &modules,
                &views,
                calib,
                cfg.queue_capacity,
                cfg.batch_size,
                &mut warm,
            )?
        } else {
            (Vec::new(), 0)
        };
        Ok(Self {
            fp,
            calib,
            batch_size: cfg.batch_size,
            sched: cfg.schedule()?,
            opts: views
                .iter()
                .map(|_| OptimizerState::new(AdamWConfig::default()))
                .collect(),
            reports: views
                .iter()
                .map(|v| WorkerReport {
                    module: v.index,
                    records: Vec::new(),
                })
                .collect(),
            views,
            modules,
            queues,
            rngs,
            t0: cfg.queue_capacity as u64,
            tick: 0,
            next_batch_id: cfg.queue_capacity as u64 + 1,
            warmup_forwards,
            last_samples: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn ticks_done(&self) -> usize {
        self.tick
    }

    pub fn total_ticks(&self) -> usize {
        self.sched.total_steps
    }

    pub fn warmup_forwards(&self) -> usize {
        self.warmup_forwards
    }

    pub fn queues(&self) -> &[BoundaryQueue<T>] {
        &self.queues
    }

    pub fn modules(&self) -> &[QuantizedModel<T>] {
        &self.modules
    }

    pub fn views(&self) -> &[ModuleView] {
        &self.views
    }

    /// Inputs consumed by each worker on the last tick (workers after the
    /// first only).
    pub fn last_samples(&self) -> &[SampleInfo] {
        &self.last_samples
    }

    /// Global tick number of the current tick, counting warm-up passes.
    fn stamp(&self) -> u64 {
        if self.views.len() > 1 {
            self.t0 + self.tick as u64 + 1
        } else {
            self.tick as u64 + 1
        }
    }

    /// Advances every worker by one step. Pushes made on this tick become
    /// visible on the next.
    pub fn tick(&mut self, sink: &mut dyn MetricSink) -> Result<()> {
        if self.tick >= self.sched.total_steps {
            return Err(Error::contract("all ticks already run"));
        }
        let t = self.tick;
        let stamp = self.stamp();
        let mut pushes = Vec::new();
        self.last_samples.clear();
        for n in 0..self.views.len() {
            let (input, batch_id, rows) = if n == 0 {
                let rows = self.calib.sample_rows(&mut self.rngs[0], self.batch_size);
                let id = self.next_batch_id;
                self.next_batch_id += 1;
                (ModuleInput::Tokens(self.calib.batch(&rows)?), id, rows)
            } else {
                let e = self.queues[n - 1].sample(&mut self.rngs[n])?;
                self.last_samples.push(SampleInfo {
                    module: n,
                    batch_id: e.batch_id,
                    stamp: e.stamp,
                    staleness: stamp - e.stamp,
                });
                let input = ModuleInput::Hidden {
                    f: e.f.clone(),
                    fhat: e.fhat.clone(),
                };
                (input, e.batch_id, e.rows.clone())
            };
            let out = mrem_step(
                self.fp,
                &mut self.modules[n],
                &self.views[n],
                &input,
                t,
                &self.sched,
                &mut self.opts[n],
            )?;
            let rec = record(stamp, t, n, &out, self.start);
            sink.record(&rec)?;
            self.reports[n].records.push(rec);
            if n + 1 < self.views.len() {
                pushes.push((
                    n,
                    QueueEntry {
                        f: out.f_out,
                        fhat: out.fhat_out,
                        batch_id,
                        rows,
                        stamp,
                    },
                ));
            }
        }
        for (n, e) in pushes {
            self.queues[n].push(e);
        }
        self.tick += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<(QuantizedModel<T>, Vec<WorkerReport>)> {
        Ok((merge_modules(self.modules)?, self.reports))
    }
}

fn record<T: Scalar>(tick: u64, step: usize, module: usize, out: &StepOutput<T>, start: Instant) -> MetricRecord {
    MetricRecord {
        tick,
        step,
        module,
        loss: out.loss,
        lambda: out.lambda,
        lr: out.lr,
        wall_ms: elapsed_ms(start),
    }
}

/// Trained model plus per-worker histories.
#[derive(Clone, Debug)]
pub struct ParallelRun<T = f32> {
    pub model: QuantizedModel<T>,
    pub reports: Vec<WorkerReport>,
    pub warmup_forwards: usize,
}

/// MREM-P: after warm-up, every module worker runs `cfg.steps` steps,
/// consuming samples from its upstream queue and feeding its downstream one.
pub fn train_mrem_p<T: Scalar>(
    fp: &Transformer<T>,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    mode: ParallelMode,
    sink: &mut dyn MetricSink,
) -> Result<ParallelRun<T>> {
    match mode {
        ParallelMode::Lockstep => {
            let mut runner = LockstepRunner::new(fp, calib, cfg)?;
            while runner.ticks_done() < runner.total_ticks() {
                runner.tick(sink)?;
            }
            let warmup_forwards = runner.warmup_forwards();
            let (model, reports) = runner.finish()?;
            Ok(ParallelRun {
                model,
                reports,
                warmup_forwards,
            })
        }
        ParallelMode::Threads => train_threads(fp, calib, cfg, sink),
    }
}

fn train_threads<T: Scalar>(
    fp: &Transformer<T>,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<ParallelRun<T>> {
    let q = init_quantized(fp, calib, cfg)?;
    let views = module_views(&q.params, &cfg.partition(fp.config.layers)?)?;
    let sched = cfg.schedule()?;
    let modules = split_modules(&q, &views);
    let t0 = cfg.queue_capacity as u64;
    let (queues, warmup_forwards) = if views.len() > 1 {
        let mut warm = ChaCha8Rng::seed_from_u64(cfg.seed);
        warmup_fill(
            fp,
            &modules,
            &views,
            calib,
            cfg.queue_capacity,
            cfg.batch_size,
            &mut warm,
        )?
    } else {
        (Vec::new(), 0)
    };
    let queues: Vec<Mutex<(BoundaryQueue<T>, u64)>> = queues.into_iter().map(|q| Mutex::new((q, t0))).collect();
    let abort = AtomicBool::new(false);
    let start = Instant::now();
    let (tx, rx) = mpsc::sync_channel::<MetricRecord>(256);

    let results = std::thread::scope(|s| -> Vec<Result<(QuantizedModel<T>, WorkerReport)>> {
        let handles: Vec<_> = modules
            .into_iter()
            .zip(&views)
            .map(|(mut module, view)| {
                let tx = tx.clone();
                let (queues, abort) = (&queues, &abort);
                s.spawn(move || -> Result<(QuantizedModel<T>, WorkerReport)> {
                    let n = view.index;
                    let mut rng = worker_rng(cfg.seed, n);
                    let mut opt = OptimizerState::new(AdamWConfig::default());
                    let mut report = WorkerReport {
                        module: n,
                        records: Vec::new(),
                    };
                    let mut batch_id = t0 + 1;
                    let run = (|| -> Result<()> {
                        for t in 0..sched.total_steps {
                            if abort.load(Ordering::Relaxed) {
                                return Err(Error::Runtime("aborted after another worker failed".into()));
                            }
                            let (input, id, rows) = if n == 0 {
                                let rows = calib.sample_rows(&mut rng, cfg.batch_size);
                                batch_id += 1;
                                (ModuleInput::Tokens(calib.batch(&rows)?), batch_id - 1, rows)
                            } else {
                                let guard = queues[n - 1]
                                    .lock()
                                    .map_err(|_| Error::Runtime("queue lock poisoned".into()))?;
                                let e = guard.0.sample(&mut rng)?;
                                let input = ModuleInput::Hidden {
                                    f: e.f.clone(),
                                    fhat: e.fhat.clone(),
                                };
                                (input, e.batch_id, e.rows.clone())
                            };
                            let out = mrem_step(fp, &mut module, view, &input, t, &sched, &mut opt)?;
                            let local_tick = t0 + t as u64 + 1;
                            let rec = record(local_tick, t, n, &out, start);
                            report.records.push(rec.clone());
                            let _ = tx.send(rec);
                            if !view.is_last() {
                                let mut guard = queues[n]
                                    .lock()
                                    .map_err(|_| Error::Runtime("queue lock poisoned".into()))?;
                                guard.1 += 1;
                                let stamp = guard.1;
                                guard.0.push(QueueEntry {
                                    f: out.f_out,
                                    fhat: out.fhat_out,
                                    batch_id: id,
                                    rows,
                                    stamp,
                                });
                            }
                        }
                        Ok(())
                    })();
                    if run.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    run.map(|_| (module, report))
                })
            })
            .collect();
        drop(tx);
        let mut sink_err = None;
        for rec in rx.iter() {
            if sink_err.is_none() {
                if let Err(e) = sink.record(&rec) {
                    abort.store(true, Ordering::Relaxed);
                    sink_err = Some(e);
                }
            }
        }
        let mut out: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect();
        if let Some(e) = sink_err {
            out.push(Err(e));
        }
        out
    });

    let mut parts = Vec::new();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok((m, rep)) => {
                parts.push(m);
                reports.push(rep);
            }
            Err(e) => errors.push(e),
        }
    }
    // Report the original failure rather than the aborts it triggered.
    let is_abort = |e: &Error| matches!(e, Error::Runtime(m) if m.starts_with("aborted"));
    if let Some(i) = errors
        .iter()
        .position(|e| !is_abort(e))
        .or((!errors.is_empty()).then_some(0))
    {
        return Err(errors.swap_remove(i));
    }
    Ok(ParallelRun {
        model: merge_modules(parts)?,
        reports,
        warmup_forwards,
    })
}

/// Idle fraction of an `N`-stage pipeline over `M` micro-batches.
pub fn gpipe_bubble(stages: usize, micro_batches: usize) -> f64 {
    if stages == 0 || micro_batches == 0 {
        return 0.0;
    }
    (stages - 1) as f64 / (stages + micro_batches - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeedupConfig {
    pub modules: usize,
    pub steps: usize,
    pub queue_capacity: usize,
    pub micro_batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupReport {
    pub config: SpeedupConfig,
    /// Warm-up passes plus one tick per step with all workers concurrent.
    pub mrem_p_ticks: f64,
    /// One module step per tick, modules one after another.
    pub sequential_ticks: f64,
    /// Sequential work inflated by the pipeline bubble.
    pub gpipe_ticks: f64,
    pub bubble: f64,
}

impl SpeedupReport {
    pub fn speedup(&self) -> f64 {
        self.sequential_ticks / self.mrem_p_ticks
    }

    pub fn gpipe_speedup(&self) -> f64 {
        self.sequential_ticks / self.gpipe_ticks
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("schedule,ticks,speedup_vs_sequential\n");
        s += &format!("sequential,{},1\n", self.sequential_ticks);
        s += &format!("mrem-p,{},{}\n", self.mrem_p_ticks, self.speedup());
        s += &format!("gpipe,{},{}\n", self.gpipe_ticks, self.gpipe_speedup());
        s
    }
}

impl fmt::Display for SpeedupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "N={} T={} t0={} M={}  bubble={:.4}",
            c.modules, c.steps, c.queue_capacity, c.micro_batches, self.bubble
        )?;
        writeln!(f, "{:<12}{:>12}{:>10}", "schedule", "ticks", "speedup")?;
        writeln!(f, "{:<12}{:>12}{:>10.2}", "sequential", self.sequential_ticks, 1.0)?;
        writeln!(f, "{:<12}{:>12}{:>10.2}", "mrem-p", self.mrem_p_ticks, self.speedup())?;
        write!(
            f,
            "{:<12}{:>12}{:>10.2}",
            "gpipe",
            self.gpipe_ticks,
            self.gpipe_speedup()
        )
    }
}

/// Closed-form tick accounting for the three schedules.
pub fn simulate_speedup(cfg: SpeedupConfig) -> Result<SpeedupReport> {
    if cfg.modules == 0 || cfg.steps == 0 || cfg.micro_batches == 0 {
        return Err(Error::contract(format!("invalid speed-up config {cfg:?}")));
    }
    let (n, t, m) = (cfg.modules as f64, cfg.steps as f64, cfg.micro_batches as f64);
    let warmup = if cfg.modules > 1 {
        n * cfg.queue_capacity as f64
    } else {
        0.0
    };
    Ok(SpeedupReport {
        config: cfg,
        mrem_p_ticks: t + warmup,
        sequential_ticks: n * t,
        gpipe_ticks: n * t * (n + m - 1.0) / m,
        bubble: gpipe_bubble(cfg.modules, cfg.micro_batches),
    })
}
