//! Command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Method, RunConfig};
use crate::data::{gen_synthetic_task, sample_calibration, CalibrationSet, Dataset};
use crate::error::{Error, Result};
use crate::metrics::CsvSink;
use crate::model::{Network, QuantizedModel, Transformer};
use crate::parallel::{simulate_speedup, train_mrem_p};
use crate::report::{accuracy, eval_batches, reconstruction_report, ReconstructionReport};
use crate::sequential::{train_fp, train_mrem_s, train_qat, train_rem};

#[derive(Parser, Debug)]
#[command(
    name = "mrem",
    version,
    about = "Module-wise reconstruction quantization of a toy transformer"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic majority task to the run directory.
    GenData,
    /// Train the full-precision model.
    TrainFp,
    /// Quantize the full-precision checkpoint.
    Quantize {
        #[arg(long)]
        method: Option<String>,
        /// Weight, embedding and activation bits, e.g. 2,2,8.
        #[arg(long)]
        bits: Option<String>,
        #[arg(long)]
        modules: Option<usize>,
        /// lockstep or threads.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pcq: bool,
    },
    /// Held-out accuracy and logit MSE against the full-precision model.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Per-layer reconstruction error of a quantized checkpoint.
    ReportErrorPropagation {
        #[arg(long)]
        fp: Option<PathBuf>,
        #[arg(long)]
        q: Option<PathBuf>,
    },
    /// Tick accounting for sequential, pipelined and GPipe schedules.
    SimulateSpeedup {
        #[arg(long)]
        modules: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        queue_capacity: Option<usize>,
        #[arg(long)]
        micro_batches: Option<usize>,
    },
}

/// Resolves the effective config: defaults, then file, then flags.
pub fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(s) = common.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &common.run_dir {
        flags.push(("run_dir".into(), d.display().to_string()));
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        flags.push((k.into(), v.into()));
    }
    let mut opt = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.into(), v));
        }
    };
    match command {
        Command::Quantize {
            method,
            bits,
            modules,
            mode,
            steps,
            pcq,
        } => {
            opt("method", method.clone());
            opt("bits", bits.clone());
            opt("modules", modules.map(|m| m.to_string()));
            opt("mode", mode.clone());
            opt("steps", steps.map(|m| m.to_string()));
            opt("pcq", pcq.then(|| "true".to_string()));
        }
        Command::SimulateSpeedup {
            modules,
            steps,
            queue_capacity,
            micro_batches,
        } => {
            opt("modules", modules.map(|m| m.to_string()));
            opt("steps", steps.map(|m| m.to_string()));
            opt("queue_capacity", queue_capacity.map(|m| m.to_string()));
            opt("micro_batches", micro_batches.map(|m| m.to_string()));
        }
        Command::ReportErrorPropagation { fp, q } => {
            opt("fp_ckpt", fp.as_ref().map(|p| p.display().to_string()));
            opt("q_ckpt", q.as_ref().map(|p| p.display().to_string()));
        }
        Command::Eval { .. } | Command::GenData | Command::TrainFp => {}
    }
    for (k, v) in flags {
        cfg.set(&k, &v)?;
    }
    if let Command::SimulateSpeedup { modules: Some(_), .. } = command {
        // The tick model does not need a model that can be split that way.
        let usage = |e: Error| Error::Usage(e.to_string());
        cfg.train.validate().map_err(usage)?;
    } else {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(cfg.run_dir.join("ckpt"))?;
    fs::write(cfg.run_dir.join("config.echo"), cfg.to_text())?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    gen_synthetic_task(&cfg.task, cfg.seed)
}

fn calibration(cfg: &RunConfig, data: &Dataset) -> Result<CalibrationSet> {
    sample_calibration(data, cfg.calib_size, cfg.seed.wrapping_add(1))
}

fn write_split(path: &Path, split: &crate::data::Split) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "label\ttokens")?;
    for i in 0..split.len() {
        let toks: Vec<String> = split.row(i).iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", split.labels[i], toks.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

fn error_report(
    cfg: &RunConfig,
    fp: &Transformer<f32>,
    q: &QuantizedModel<f32>,
    calib: &CalibrationSet,
) -> Result<ReconstructionReport> {
    let batches = eval_batches(calib, cfg.eval_batches, cfg.train.batch_size)?;
    reconstruction_report(fp, q, &batches)
}

/// Executes one command and returns the text printed on success.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let mut out = String::new();
    match &cli.command {
        Command::GenData => {
            prepare_run_dir(&cfg)?;
            let data = dataset(&cfg)?;
            let dir = cfg.run_dir.join("data");
            fs::create_dir_all(&dir)?;
            write_split(&dir.join("train.tsv"), &data.train)?;
            write_split(&dir.join("held_out.tsv"), &data.held_out)?;
            let pos = data.train.labels.iter().filter(|&&l| l == 1).count();
            out += &format!(
                "wrote {} train and {} held-out examples to {} ({:.1}% label 1)\n",
                data.train.len(),
                data.held_out.len(),
                dir.display(),
                100.0 * pos as f64 / data.train.len() as f64
            );
        }
        Command::TrainFp => {
            prepare_run_dir(&cfg)?;
            let data = dataset(&cfg)?;
            let mut sink = CsvSink::create(&cfg.run_dir.join("fp_metrics.csv"))?;
            let model = train_fp::<f32>(cfg.model, &data.train, &cfg.fp_config(), &mut sink)?;
            let path = cfg.fp_ckpt_path();
            checkpoint::save_fp(&path, &model)?;
            let acc = accuracy(&model, &data.held_out, 256)?;
            out += &format!("held-out accuracy {acc:.4}\ncheckpoint {}\n", path.display());
        }
        Command::Quantize { .. } => {
            prepare_run_dir(&cfg)?;
            let fp = checkpoint::load_fp(&cfg.fp_ckpt_path())?;
            if fp.config != cfg.model {
                return Err(Error::Usage(
                    "full-precision checkpoint does not match the configured model".into(),
                ));
            }
            let data = dataset(&cfg)?;
            let calib = calibration(&cfg, &data)?;
            let tc = cfg.train_config();
            let mut sink = CsvSink::create(&cfg.run_dir.join("metrics.csv"))?;
            let q = match cfg.method {
                Method::Rem => train_rem(&fp, &calib, &tc, &mut sink)?,
                Method::MremS => train_mrem_s(&fp, &calib, &tc, &mut sink)?,
                Method::MremP => train_mrem_p(&fp, &calib, &tc, cfg.mode, &mut sink)?.model,
                Method::Qat => train_qat(&fp, &data.train, &tc, &mut sink)?,
            };
            let path = cfg.q_ckpt_path();
            checkpoint::save_quantized(&path, &q)?;
            let report = error_report(&cfg, &fp, &q, &calib)?;
            fs::write(cfg.run_dir.join("error_propagation.csv"), report.to_csv())?;
            let acc = accuracy(&q, &data.held_out, 256)?;
            out += &format!(
                "method {} bits {} steps {}: held-out accuracy {acc:.4}, logit MSE {:.6e}, total reconstruction {:.6e}\ncheckpoint {}\n",
                cfg.method.name(),
                cfg.train.plan.bits,
                sink.rows(),
                report.logit_mse,
                report.total(),
                path.display()
            );
        }
        Command::Eval { ckpt } => {
            let data = dataset(&cfg)?;
            let path = ckpt.clone().unwrap_or_else(|| cfg.q_ckpt_path());
            let loaded = Checkpoint::load(&path)?;
            let fp = checkpoint::load_fp(&cfg.fp_ckpt_path())?;
            let (acc, logit_mse) = match &loaded {
                Checkpoint::FullPrecision(m) => (accuracy(m, &data.held_out, 256)?, logit_distance(&fp, m, &data)?),
                Checkpoint::Quantized(m) => (accuracy(m, &data.held_out, 256)?, logit_distance(&fp, m, &data)?),
            };
            out += &format!("held-out accuracy {acc:.4}\nlogit MSE vs full precision {logit_mse:.6e}\n");
        }
        Command::ReportErrorPropagation { .. } => {
            prepare_run_dir(&cfg)?;
            let fp = checkpoint::load_fp(&cfg.fp_ckpt_path())?;
            let data = dataset(&cfg)?;
            let calib = calibration(&cfg, &data)?;
            let batches = eval_batches(&calib, cfg.eval_batches, cfg.train.batch_size)?;
            let report = match Checkpoint::load(&cfg.q_ckpt_path())? {
                Checkpoint::FullPrecision(m) => reconstruction_report(&fp, &m, &batches)?,
                Checkpoint::Quantized(m) => reconstruction_report(&fp, &m, &batches)?,
            };
            let csv = report.to_csv();
            fs::write(cfg.run_dir.join("error_propagation.csv"), &csv)?;
            out += &csv;
        }
        Command::SimulateSpeedup { .. } => {
            let report = simulate_speedup(cfg.speedup_config())?;
            if let Ok(()) = fs::create_dir_all(&cfg.run_dir) {
                fs::write(cfg.run_dir.join("speedup.csv"), report.to_csv())?;
            }
            out += &format!("{report}\n");
        }
    }
    Ok(out)
}

fn logit_distance(fp: &Transformer<f32>, other: &impl Network<f32>, data: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in data.held_out.chunks(256) {
        let (tokens, _) = chunk?;
        let a = fp.forward(&tokens)?.logits;
        let b = other.forward(&tokens)?.logits;
        sum += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f64::from(x - y).powi(2))
            .sum::<f64>();
        count += a.numel();
    }
    Ok(sum / count as f64)
}

/// Entry point for the binary: parses arguments, runs, maps errors to a
/// one-line diagnostic and exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
