//! Run configuration: a flat `key = value` text format.
//!
//! Lines starting with `#` are comments. Values set on the command line win
//! over values from a file, which win over built-in defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::model::{BitWidths, ModelConfig, QuantPlan};
use crate::parallel::{ParallelMode, SpeedupConfig};
use crate::partition::partition_layers;
use crate::sequential::{FpTrainConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Rem,
    MremS,
    MremP,
    Qat,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rem => "rem",
            Self::MremS => "mrem-s",
            Self::MremP => "mrem-p",
            Self::Qat => "qat",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rem" => Ok(Self::Rem),
            "mrem-s" => Ok(Self::MremS),
            "mrem-p" => Ok(Self::MremP),
            "qat" => Ok(Self::Qat),
            _ => Err(Error::Usage(format!("unknown method `{s}` (rem, mrem-s, mrem-p, qat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub calib_size: usize,
    pub fp: FpTrainConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub mode: ParallelMode,
    pub eval_batches: usize,
    pub micro_batches: usize,
    pub fp_ckpt: Option<PathBuf>,
    pub q_ckpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let steps = 2000;
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            calib_size: 4096,
            fp: FpTrainConfig::default(),
            train: TrainConfig {
                steps,
                plan: QuantPlan::new(BitWidths::new(2, 2, 8)),
                ..Default::default()
            },
            method: Method::MremP,
            mode: ParallelMode::Lockstep,
            eval_batches: 8,
            micro_batches: 4,
            fp_ckpt: None,
            q_ckpt: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Usage(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "run_dir" => self.run_dir = PathBuf::from(v),
            "layers" => self.model.layers = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "d_ff" => self.model.d_ff = parse(key, v)?,
            "vocab" => {
                self.model.vocab = parse(key, v)?;
                self.task.vocab = self.model.vocab;
            }
            "max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "num_classes" => self.model.num_classes = parse(key, v)?,
            "train_size" => self.task.train_size = parse(key, v)?,
            "held_out_size" => self.task.held_out_size = parse(key, v)?,
            "seq_len" => self.task.seq_len = parse(key, v)?,
            "calib_size" => self.calib_size = parse(key, v)?,
            "fp_steps" => self.fp.steps = parse(key, v)?,
            "fp_lr" => self.fp.lr = parse(key, v)?,
            "fp_warmup_steps" => self.fp.warmup_steps = parse(key, v)?,
            "fp_weight_decay" => self.fp.weight_decay = parse(key, v)?,
            "fp_batch_size" => self.fp.batch_size = parse(key, v)?,
            "method" => self.method = v.parse()?,
            "bits" => self.train.plan.bits = v.parse()?,
            "pcq" => self.train.plan.per_channel = parse_bool(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "rem_steps" => {
                self.train.rem_steps = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "modules" => self.train.modules = parse(key, v)?,
            "queue_capacity" => self.train.queue_capacity = parse(key, v)?,
            "teacher_fraction" => self.train.teacher_fraction = parse(key, v)?,
            "sequential_teacher_forcing" => self.train.sequential_teacher_forcing = parse_bool(key, v)?,
            "init_examples" => self.train.init_examples = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "eval_batches" => self.eval_batches = parse(key, v)?,
            "micro_batches" => self.micro_batches = parse(key, v)?,
            "fp_ckpt" => self.fp_ckpt = Some(PathBuf::from(v)),
            "q_ckpt" => self.q_ckpt = Some(PathBuf::from(v)),
            "partition" => {
                let b: Vec<usize> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                if b.len() < 2 {
                    return Err(Error::Usage("partition needs at least two boundaries".into()));
                }
                self.train.modules = b.len() - 1;
                let expected = partition_layers(*b.last().unwrap(), self.train.modules)?;
                if expected.boundaries() != b.as_slice() {
                    return Err(Error::Usage(format!(
                        "partition {b:?} is not the balanced split {:?}",
                        expected.boundaries()
                    )));
                }
            }
            other => return Err(Error::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Usage(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: Error| Error::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        partition_layers(self.model.layers, self.train.modules).map_err(usage)?;
        if self.task.seq_len > self.model.max_seq_len || self.task.seq_len == 0 {
            return Err(Error::Usage(format!(
                "seq_len {} must be in 1..={}",
                self.task.seq_len, self.model.max_seq_len
            )));
        }
        if self.task.vocab != self.model.vocab {
            return Err(Error::Usage("task vocabulary differs from the model's".into()));
        }
        if self.calib_size == 0 || self.calib_size > self.task.train_size {
            return Err(Error::Usage(format!(
                "calib_size {} must be in 1..={}",
                self.calib_size, self.task.train_size
            )));
        }
        if self.fp.steps == 0 || self.fp.batch_size == 0 || self.fp.warmup_steps >= self.fp.steps {
            return Err(Error::Usage("fp_steps must exceed fp_warmup_steps".into()));
        }
        if self.eval_batches == 0 || self.micro_batches == 0 {
            return Err(Error::Usage("eval_batches and micro_batches must be positive".into()));
        }
        Ok(())
    }

    /// Seeded training config for the quantization trainers.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn fp_config(&self) -> FpTrainConfig {
        FpTrainConfig {
            seed: self.seed,
            ..self.fp
        }
    }

    pub fn speedup_config(&self) -> SpeedupConfig {
        SpeedupConfig {
            modules: self.train.modules,
            steps: self.train.steps,
            queue_capacity: self.train.queue_capacity,
            micro_batches: self.micro_batches,
        }
    }

    pub fn fp_ckpt_path(&self) -> PathBuf {
        self.fp_ckpt
            .clone()
            .unwrap_or_else(|| self.run_dir.join("ckpt").join("fp.mrmq"))
    }

    pub fn q_ckpt_path(&self) -> PathBuf {
        self.q_ckpt
            .clone()
            .unwrap_or_else(|| self.run_dir.join("ckpt").join(format!("{}.mrmq", self.method.name())))
    }

    /// Every effective setting, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("run_dir", self.run_dir.display().to_string());
        kv("layers", m.layers.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("vocab", m.vocab.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("train_size", self.task.train_size.to_string());
        kv("held_out_size", self.task.held_out_size.to_string());
        kv("seq_len", self.task.seq_len.to_string());
        kv("calib_size", self.calib_size.to_string());
        kv("fp_steps", self.fp.steps.to_string());
        kv("fp_lr", self.fp.lr.to_string());
        kv("fp_warmup_steps", self.fp.warmup_steps.to_string());
        kv("fp_weight_decay", self.fp.weight_decay.to_string());
        kv("fp_batch_size", self.fp.batch_size.to_string());
        kv("method", self.method.name().to_string());
        kv("bits", t.plan.bits.to_string());
        kv("pcq", t.plan.per_channel.to_string());
        kv("steps", t.steps.to_string());
        kv("rem_steps", t.rem_steps.map_or("auto".to_string(), |n| n.to_string()));
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("modules", t.modules.to_string());
        if let Ok(p) = partition_layers(m.layers, t.modules) {
            let b: Vec<String> = p.boundaries().iter().map(usize::to_string).collect();
            kv("partition", b.join(","));
        }
        kv("queue_capacity", t.queue_capacity.to_string());
        kv("teacher_fraction", t.teacher_fraction.to_string());
        kv("sequential_teacher_forcing", t.sequential_teacher_forcing.to_string());
        kv("init_examples", t.init_examples.to_string());
        kv(
            "mode",
            match self.mode {
                ParallelMode::Lockstep => "lockstep",
                ParallelMode::Threads => "threads",
            }
            .to_string(),
        );
        kv("eval_batches", self.eval_batches.to_string());
        kv("micro_batches", self.micro_batches.to_string());
        kv("fp_ckpt", self.fp_ckpt_path().display().to_string());
        kv("q_ckpt", self.q_ckpt_path().display().to_string());
        s
    }
}
