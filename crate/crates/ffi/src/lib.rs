//! C ABI over `mrem`.
//!
//! Every fallible function returns an [`MremStatus`]; on failure a message is
//! available from [`mrem_last_error`] on the same thread. Models are opaque
//! [`MremModel`] handles released with [`mrem_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mrem::checkpoint::Checkpoint;
use mrem::data::CalibrationSet;
use mrem::metrics::NullSink;
use mrem::parallel::{gpipe_bubble, simulate_speedup, train_mrem_p, ParallelMode, SpeedupConfig};
use mrem::sequential::{train_mrem_s, train_rem, TrainConfig};
use mrem::{BitWidths, Error, ModelConfig, Network, QuantPlan, QuantizedModel, TokenBatch, Transformer};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MremStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Training = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MremMethod {
    Rem = 0,
    MremS = 1,
    MremPLockstep = 2,
    MremPThreads = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MremModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

/// Bit-widths; 0 leaves that class of sites in full precision.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MremBits {
    pub weight: u32,
    pub embedding: u32,
    pub activation: u32,
    pub per_channel: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MremQuantizeOptions {
    pub method: MremMethod,
    pub bits: MremBits,
    pub steps: usize,
    pub modules: usize,
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub teacher_fraction: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MremSpeedupReport {
    pub mrem_p_ticks: f64,
    pub sequential_ticks: f64,
    pub gpipe_ticks: f64,
    pub bubble: f64,
    pub speedup: f64,
}

/// A full-precision or quantized model.
pub struct MremModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MremStatus {
    match err {
        Error::Io(_) => MremStatus::Io,
        Error::Format(_) => MremStatus::Format,
        Error::Training { .. } => MremStatus::Training,
        Error::Runtime(_) => MremStatus::Runtime,
        Error::Dimension { .. } | Error::Contract(_) | Error::Input(_) | Error::Usage(_) => MremStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MremStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MremStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            MremStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_last_error(msg);
            MremStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            MremStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::Invalid("path is not valid UTF-8".into()))
}

unsafe fn model_arg<'a>(m: *const MremModel) -> Result<&'a MremModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn tokens_arg(ids: *const u32, rows: usize, seq: usize) -> Result<Vec<usize>, Failure> {
    if ids.is_null() {
        return Err(Failure::Null("token ids"));
    }
    let n = rows
        .checked_mul(seq)
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid("token batch must be non-empty".into()))?;
    Ok(std::slice::from_raw_parts(ids, n).iter().map(|&t| t as usize).collect())
}

fn to_core_config(c: &MremModelConfig) -> ModelConfig {
    ModelConfig {
        layers: c.layers,
        d_model: c.d_model,
        heads: c.heads,
        d_ff: c.d_ff,
        vocab: c.vocab,
        max_seq_len: c.max_seq_len,
        num_classes: c.num_classes,
    }
}

fn from_core_config(c: &ModelConfig) -> MremModelConfig {
    MremModelConfig {
        layers: c.layers,
        d_model: c.d_model,
        heads: c.heads,
        d_ff: c.d_ff,
        vocab: c.vocab,
        max_seq_len: c.max_seq_len,
        num_classes: c.num_classes,
    }
}

fn bits_option(b: u32) -> Result<Option<u32>, Failure> {
    match b {
        0 | 32 => Ok(None),
        2..=16 => Ok(Some(b)),
        _ => Err(Failure::Invalid(format!("unsupported bit-width {b}"))),
    }
}

fn to_plan(b: &MremBits) -> Result<QuantPlan, Failure> {
    Ok(QuantPlan {
        bits: BitWidths {
            weight: bits_option(b.weight)?,
            embedding: bits_option(b.embedding)?,
            activation: bits_option(b.activation)?,
        },
        per_channel: b.per_channel,
    })
}

fn into_handle(inner: Checkpoint, out: *mut *mut MremModel) {
    // SAFETY: callers check `out` for null before doing any work.
    unsafe { *out = Box::into_raw(Box::new(MremModel { inner })) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrem_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mrem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default toy-task model dimensions.
#[no_mangle]
pub extern "C" fn mrem_default_config() -> MremModelConfig {
    from_core_config(&ModelConfig::default())
}

/// Default quantization options: MREM-P lockstep at 2-2-8.
#[no_mangle]
pub extern "C" fn mrem_default_quantize_options() -> MremQuantizeOptions {
    let t = TrainConfig::default();
    MremQuantizeOptions {
        method: MremMethod::MremPLockstep,
        bits: MremBits {
            weight: 2,
            embedding: 2,
            activation: 8,
            per_channel: false,
        },
        steps: t.steps,
        modules: t.modules,
        queue_capacity: t.queue_capacity,
        batch_size: t.batch_size,
        lr: t.lr,
        teacher_fraction: t.teacher_fraction,
        seed: t.seed,
    }
}

/// Randomly initialized full-precision model.
///
/// # Safety
/// `config` must point to a valid config and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_new_random(
    config: *const MremModelConfig,
    seed: u64,
    out: *mut *mut MremModel,
) -> MremStatus {
    guard(|| {
        let config = config.as_ref().ok_or(Failure::Null("config"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let model = Transformer::<f32>::new_random(to_core_config(config), seed)?;
        into_handle(Checkpoint::FullPrecision(model), out);
        Ok(())
    })
}

/// Load an MRMQ checkpoint, full-precision or quantized.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_load(path: *const c_char, out: *mut *mut MremModel) -> MremStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        into_handle(Checkpoint::load(path)?, out);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_save(model: *const MremModel, path: *const c_char) -> MremStatus {
    guard(|| {
        let model = model_arg(model)?;
        model.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_free(model: *mut MremModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_config(model: *const MremModel, out: *mut MremModelConfig) -> MremStatus {
    guard(|| {
        let model = model_arg(model)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = from_core_config(model.inner.config());
        Ok(())
    })
}

/// Bit-widths of a quantized model; all zero for a full-precision one.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_bits(model: *const MremModel, out: *mut MremBits) -> MremStatus {
    guard(|| {
        let model = model_arg(model)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = match &model.inner {
            Checkpoint::FullPrecision(_) => MremBits::default(),
            Checkpoint::Quantized(q) => MremBits {
                weight: q.plan.bits.weight.unwrap_or(0),
                embedding: q.plan.bits.embedding.unwrap_or(0),
                activation: q.plan.bits.activation.unwrap_or(0),
                per_channel: q.plan.per_channel,
            },
        };
        Ok(())
    })
}

/// Classify `batch × seq` row-major token ids, writing `batch × num_classes`
/// logits.
///
/// # Safety
/// `ids` must hold `batch * seq` values and `logits` have room for
/// `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mrem_model_forward(
    model: *const MremModel,
    ids: *const u32,
    batch: usize,
    seq: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MremStatus {
    guard(|| {
        let model = model_arg(model)?;
        let tokens = TokenBatch::new(batch, seq, tokens_arg(ids, batch, seq)?)?;
        if logits.is_null() {
            return Err(Failure::Null("logits"));
        }
        let out = match &model.inner {
            Checkpoint::FullPrecision(m) => m.forward(&tokens)?.logits,
            Checkpoint::Quantized(m) => m.forward(&tokens)?.logits,
        };
        if logits_len < out.numel() {
            return Err(Failure::Invalid(format!(
                "logits buffer holds {logits_len} values, need {}",
                out.numel()
            )));
        }
        std::slice::from_raw_parts_mut(logits, out.numel()).copy_from_slice(out.data());
        Ok(())
    })
}

/// Post-training quantization of a full-precision model against
/// `rows × seq` calibration token ids.
///
/// # Safety
/// `fp` must be a live full-precision handle, `calib_ids` must hold
/// `rows * seq` values, `options` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_quantize(
    fp: *const MremModel,
    calib_ids: *const u32,
    rows: usize,
    seq: usize,
    options: *const MremQuantizeOptions,
    out: *mut *mut MremModel,
) -> MremStatus {
    guard(|| {
        let fp = match &model_arg(fp)?.inner {
            Checkpoint::FullPrecision(m) => m,
            Checkpoint::Quantized(_) => return Err(Failure::Invalid("quantize needs a full-precision model".into())),
        };
        let opts = options.as_ref().ok_or(Failure::Null("options"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let calib = CalibrationSet::from_sequences(seq, tokens_arg(calib_ids, rows, seq)?)?;
        let cfg = TrainConfig {
            steps: opts.steps,
            lr: opts.lr,
            batch_size: opts.batch_size,
            plan: to_plan(&opts.bits)?,
            modules: opts.modules,
            queue_capacity: opts.queue_capacity,
            teacher_fraction: opts.teacher_fraction,
            seed: opts.seed,
            ..TrainConfig::default()
        };
        let q: QuantizedModel<f32> = match opts.method {
            MremMethod::Rem => train_rem(fp, &calib, &cfg, &mut NullSink)?,
            MremMethod::MremS => train_mrem_s(fp, &calib, &cfg, &mut NullSink)?,
            MremMethod::MremPLockstep => train_mrem_p(fp, &calib, &cfg, ParallelMode::Lockstep, &mut NullSink)?.model,
            MremMethod::MremPThreads => train_mrem_p(fp, &calib, &cfg, ParallelMode::Threads, &mut NullSink)?.model,
        };
        into_handle(Checkpoint::Quantized(q), out);
        Ok(())
    })
}

/// Teacher-forcing weight `max(1 - t/t0, 0)`; 0 when `t0` is 0.
#[no_mangle]
pub extern "C" fn mrem_lambda_schedule(t: usize, t0: usize) -> f64 {
    mrem::objectives::lambda_schedule(t, t0)
}

/// GPipe bubble fraction `(N-1)/(N+M-1)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_gpipe_bubble(stages: usize, micro_batches: usize, out: *mut f64) -> MremStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        if stages == 0 || micro_batches == 0 {
            return Err(Failure::Invalid("stages and micro-batches must be positive".into()));
        }
        *out = gpipe_bubble(stages, micro_batches);
        Ok(())
    })
}

/// Closed-form tick counts for MREM-P, sequential MREM and GPipe.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mrem_simulate_speedup(
    modules: usize,
    steps: usize,
    queue_capacity: usize,
    micro_batches: usize,
    out: *mut MremSpeedupReport,
) -> MremStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let r = simulate_speedup(SpeedupConfig {
            modules,
            steps,
            queue_capacity,
            micro_batches,
        })?;
        *out = MremSpeedupReport {
            mrem_p_ticks: r.mrem_p_ticks,
            sequential_ticks: r.sequential_ticks,
            gpipe_ticks: r.gpipe_ticks,
            bubble: r.bubble,
            speedup: r.speedup(),
        };
        Ok(())
    })
}
