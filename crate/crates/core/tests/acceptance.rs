//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! The directional comparisons share one full-precision model trained on the
//! default toy config. Seed `s` selects the calibration sample (`s + 1`) and
//! the row-sampling streams of the trainers.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mrem::checkpoint;
use mrem::config::RunConfig;
use mrem::data::{gen_synthetic_task, sample_calibration, CalibrationSet, Dataset};
use mrem::metrics::{CsvSink, NullSink};
use mrem::objectives::mrem_loss;
use mrem::parallel::{simulate_speedup, train_mrem_p, ParallelMode, SpeedupConfig};
use mrem::report::{accuracy, eval_batches, reconstruction_report, ReconstructionReport};
use mrem::sequential::{train_fp, train_mrem_s, train_rem, TrainConfig};
use mrem::{BitWidths, Network, QuantPlan, QuantizedModel, TokenBatch, Transformer};

const SEEDS: u64 = 5;
/// Optimizer steps per module for the directional comparisons.
const STEPS: usize = 200;
const TEACHER_STEPS: usize = 250;
const EVAL_BATCHES: usize = 32;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    /// Failure caused by the host rather than the implementation.
    environment: bool,
    detail: String,
}

fn outcome(id: &'static str, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        pass,
        environment: false,
        detail,
    }
}

/// Runs `f`, turning a panic into a failure message.
fn guarded(f: impl FnOnce()) -> (Result<(), String>, Duration) {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())
    });
    (r, start.elapsed())
}

fn bits(s: &str) -> QuantPlan {
    QuantPlan::new(s.parse().expect("bit widths"))
}

struct Bench {
    run: RunConfig,
    data: Dataset,
    fp: Transformer<f32>,
}

impl Bench {
    fn calib(&self, seed: u64) -> CalibrationSet {
        sample_calibration(&self.data, self.run.calib_size, seed + 1).unwrap()
    }

    fn eval(&self, calib: &CalibrationSet) -> Vec<TokenBatch> {
        eval_batches(calib, EVAL_BATCHES, self.run.train.batch_size).unwrap()
    }

    fn train_config(&self, seed: u64, plan: QuantPlan, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            seed,
            plan,
            ..self.run.train_config()
        }
    }

    fn report(&self, q: &QuantizedModel<f32>, eval: &[TokenBatch]) -> ReconstructionReport {
        reconstruction_report(&self.fp, q, eval).unwrap()
    }
}

fn quantizer_laws() -> Outcome {
    let start = Instant::now();
    let bad = common::quantizer_law_violations(10_000, 2024);
    let t = start.elapsed();
    let pass = bad.is_empty() && t < Duration::from_secs(5);
    let first = bad.first().map_or(String::new(), |b| format!(", first: {b}"));
    outcome(
        "1",
        "quantizer laws",
        pass,
        format!("10000 cases, {} violations, {t:.2?}{first}", bad.len()),
    )
}

fn gradient_oracle() -> Outcome {
    use common::gradcheck;
    let (r, t) = guarded(|| {
        gradcheck::check_every_op();
        gradcheck::check_step_gradients();
        gradcheck::check_tape_fake_quant();
        gradcheck::check_quantized_models();
        gradcheck::check_full_precision_model();
        gradcheck::check_ternary_sites();
    });
    let pass = r.is_ok() && t < Duration::from_secs(60);
    let detail = match r {
        Ok(()) => format!("ops, quantizer steps and composed 2-layer models, {t:.2?}"),
        Err(e) => format!("{e} ({t:.2?})"),
    };
    outcome("2", "gradient oracle", pass, detail)
}

fn fp_baseline(run: RunConfig) -> (Outcome, Bench) {
    let data = gen_synthetic_task(&run.task, run.seed).unwrap();
    let start = Instant::now();
    let fp = train_fp::<f32>(run.model, &data.train, &run.fp_config(), &mut NullSink).unwrap();
    let t = start.elapsed();
    let acc = accuracy(&fp, &data.held_out, 256).unwrap();
    let pass = acc >= 0.95 && t < Duration::from_secs(300);
    let o = outcome(
        "4",
        "full-precision baseline",
        pass,
        format!("held-out accuracy {acc:.4} after {} steps in {t:.2?}", run.fp.steps),
    );
    (o, Bench { run, data, fp })
}

fn identity_reduction(b: &Bench) -> Outcome {
    let (r, _) = guarded(|| {
        let calib = b.calib(0);
        let eval = eval_batches(&calib, 4, 32).unwrap();
        let plan = QuantPlan::new(BitWidths::disabled());
        let q = QuantizedModel::from_fp(&b.fp, plan, &calib.head(64).unwrap()).unwrap();
        for tokens in &eval {
            let a = b.fp.forward(tokens).unwrap();
            let z = q.forward(tokens).unwrap();
            assert!(
                a.logits == z.logits && a.hidden == z.hidden,
                "forward differs from full precision"
            );
            assert_eq!(mrem_loss(&z.hidden, &a.hidden).unwrap(), 0.0, "mrem_loss is not zero");
            let names = q.params.param_names();
            let (loss, grads) = q.logit_mse_gradients(tokens, &a.logits, &names).unwrap();
            assert_eq!(loss, 0.0);
            for (name, g) in &grads {
                assert!(g.data().iter().all(|&v| v == 0.0), "non-zero gradient for {name}");
            }
        }
        let cfg = TrainConfig {
            init_examples: 64,
            ..b.train_config(0, plan, 5)
        };
        let init = mrem::sequential::init_quantized(&b.fp, &calib, &cfg).unwrap();
        let s = train_mrem_s(&b.fp, &calib, &cfg, &mut NullSink).unwrap();
        assert!(s.params == init.params, "MREM-S moved parameters");
        let r = train_rem(
            &b.fp,
            &calib,
            &TrainConfig {
                rem_steps: Some(2),
                ..cfg
            },
            &mut NullSink,
        )
        .unwrap();
        assert!(r.params == init.params, "REM moved parameters");
        let p = train_mrem_p(&b.fp, &calib, &cfg, ParallelMode::Lockstep, &mut NullSink).unwrap();
        assert!(p.model.params == init.params, "MREM-P moved parameters");
    });
    let detail = match &r {
        Ok(()) => "bit-identical forward, zero loss and gradients, trainers leave parameters unchanged".into(),
        Err(e) => e.clone(),
    };
    outcome("3", "identity reduction", r.is_ok(), detail)
}

/// Per-seed results of the 2-2-8 runs shared by criteria 5, 6 and 10.
struct SeedRuns {
    s: ReconstructionReport,
    r: ReconstructionReport,
    p: Option<ReconstructionReport>,
    /// Wall-clock time of the MREM-S run.
    s_time: Duration,
}

fn compare(b: &Bench, plan: &str, with_p: bool) -> Vec<SeedRuns> {
    (0..SEEDS)
        .map(|seed| {
            let calib = b.calib(seed);
            let eval = b.eval(&calib);
            let cfg = b.train_config(seed, bits(plan), STEPS);
            let start = Instant::now();
            let s = train_mrem_s(&b.fp, &calib, &cfg, &mut NullSink).unwrap();
            let s_time = start.elapsed();
            let r = train_rem(&b.fp, &calib, &cfg, &mut NullSink).unwrap();
            let p = with_p.then(|| {
                let run = train_mrem_p(&b.fp, &calib, &cfg, ParallelMode::Lockstep, &mut NullSink).unwrap();
                b.report(&run.model, &eval)
            });
            SeedRuns {
                s: b.report(&s, &eval),
                r: b.report(&r, &eval),
                p,
                s_time,
            }
        })
        .collect()
}

fn mrem_s_beats_rem(runs: &[(&str, Vec<SeedRuns>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (plan, seeds) in runs {
        let wins = seeds.iter().filter(|x| x.s.logit_mse < x.r.logit_mse).count();
        pass &= wins >= 4;
        let pairs: Vec<String> = seeds
            .iter()
            .map(|x| format!("{:.3}/{:.3}", x.s.logit_mse, x.r.logit_mse))
            .collect();
        parts.push(format!("{plan}: {wins}/5 [{}]", pairs.join(" ")));
    }
    outcome("5", "MREM-S logit MSE below REM (S/R)", pass, parts.join("; "))
}

fn mrem_p_close_to_mrem_s(seeds: &[SeedRuns]) -> Outcome {
    let ratios: Vec<f64> = seeds
        .iter()
        .map(|x| x.p.as_ref().unwrap().total() / x.s.total())
        .collect();
    let pass = ratios.iter().all(|&r| r <= 1.25);
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        "6",
        "MREM-P total loss within 1.25x of MREM-S",
        pass,
        format!("ratios [{}]", shown.join(" ")),
    )
}

fn teacher_forcing(b: &Bench) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let calib = b.calib(seed);
        let eval = b.eval(&calib);
        let loss = |fraction: f64| {
            let cfg = TrainConfig {
                teacher_fraction: fraction,
                ..b.train_config(seed, bits("2,2,4"), TEACHER_STEPS)
            };
            let run = train_mrem_p(&b.fp, &calib, &cfg, ParallelMode::Lockstep, &mut NullSink).unwrap();
            b.report(&run.model, &eval).total()
        };
        let (with, without) = (loss(0.4), loss(0.0));
        wins += usize::from(with < without);
        pairs.push(format!("{with:.3}/{without:.3}"));
    }
    outcome(
        "7",
        "teacher forcing lowers MREM-P loss (T0=0.4T / T0=0)",
        wins >= 4,
        format!("{wins}/5 [{}]", pairs.join(" ")),
    )
}

fn speedup_accounting() -> Outcome {
    let r = simulate_speedup(SpeedupConfig {
        modules: 4,
        steps: 2000,
        queue_capacity: 4,
        micro_batches: 4,
    })
    .unwrap();
    let pass = r.mrem_p_ticks == 2016.0
        && r.sequential_ticks == 8000.0
        && format!("{:.2}", r.speedup()) == "3.97"
        && r.bubble == 3.0 / 7.0;
    outcome(
        "8a",
        "speed-up accounting",
        pass,
        format!(
            "MREM-P {} ticks, sequential {} ticks, speed-up {:.2}x, bubble {:.6}",
            r.mrem_p_ticks,
            r.sequential_ticks,
            r.speedup(),
            r.bubble
        ),
    )
}

/// Threads-mode MREM-P against the seed-0 MREM-S run of the 2-2-8
/// comparison, so that the per-module input caching of MREM-S is amortized
/// over the same step budget.
fn threads_wall_clock(b: &Bench, seq: Duration) -> Outcome {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let calib = b.calib(0);
    let cfg = b.train_config(0, bits("2,2,8"), STEPS);
    let start = Instant::now();
    train_mrem_p(&b.fp, &calib, &cfg, ParallelMode::Threads, &mut NullSink).unwrap();
    let par = start.elapsed();
    let ratio = seq.as_secs_f64() / par.as_secs_f64();
    let pass = ratio >= 2.5;
    let mut o = outcome(
        "8b",
        "threads-mode wall-clock speed-up",
        pass,
        format!("MREM-S {seq:.2?}, MREM-P threads {par:.2?}, speed-up {ratio:.2}x on {cores} core(s)"),
    );
    if !pass && cores < 4 {
        o.environment = true;
        o.detail += "; needs a 4-core host";
    }
    o
}

fn runtime_fuzz() -> Outcome {
    let (r, t) = guarded(|| common::fuzz::lockstep_fuzz(1000));
    let detail = match &r {
        Ok(()) => format!("1000 ticks, queue bound, staleness, batch pairing and ownership hold, {t:.2?}"),
        Err(e) => e.clone(),
    };
    outcome("9", "runtime invariants under fuzzing", r.is_ok(), detail)
}

fn error_propagation(seeds: &[SeedRuns]) -> Outcome {
    let mut wins = 0;
    let mut embedding = Vec::new();
    for x in seeds {
        let below = x.s.layer_errors[1..]
            .iter()
            .zip(&x.r.layer_errors[1..])
            .all(|(m, r)| m <= r);
        wins += usize::from(below);
        embedding.push(format!("{:.5}/{:.5}", x.s.layer_errors[0], x.r.layer_errors[0]));
    }
    let last: Vec<String> = seeds
        .iter()
        .map(|x| {
            format!(
                "{:.3}/{:.3}",
                x.s.layer_errors.last().unwrap(),
                x.r.layer_errors.last().unwrap()
            )
        })
        .collect();
    outcome(
        "10",
        "per-layer error of MREM at or below REM",
        wins >= 4,
        format!(
            "layers 1..L: {wins}/5, last layer [{}], embedding output [{}]",
            last.join(" "),
            embedding.join(" ")
        ),
    )
}

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(b: &Bench) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let calib = b.calib(0);
    let cfg = b.train_config(0, bits("2,2,8"), 20);
    let run = |name: &str| {
        let mut sink = CsvSink::new(Vec::new()).unwrap();
        let out = train_mrem_p(&b.fp, &calib, &cfg, ParallelMode::Lockstep, &mut sink).unwrap();
        let path = dir.path().join(name);
        checkpoint::save_quantized(&path, &out.model).unwrap();
        let metrics = strip_wall(&String::from_utf8(sink.into_inner()).unwrap());
        (std::fs::read(path).unwrap(), metrics)
    };
    let (ca, ma) = run("a.mrmq");
    let (cb, mb) = run("b.mrmq");
    let pass = ca == cb && ma == mb;
    outcome(
        "11",
        "determinism",
        pass,
        format!(
            "checkpoints {} ({} bytes), metrics {} ({} rows)",
            if ca == cb { "identical" } else { "differ" },
            ca.len(),
            if ma == mb { "identical" } else { "differ" },
            ma.lines().count() - 1
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = vec![quantizer_laws(), gradient_oracle()];
    let (fp, bench) = fp_baseline(RunConfig::default());
    results.push(identity_reduction(&bench));
    results.push(fp);
    let b228 = compare(&bench, "2,2,8", true);
    let b224 = compare(&bench, "2,2,4", false);
    let runs = [("2-2-8", b228), ("2-2-4", b224)];
    results.push(mrem_s_beats_rem(&runs));
    results.push(mrem_p_close_to_mrem_s(&runs[0].1));
    results.push(teacher_forcing(&bench));
    results.push(speedup_accounting());
    results.push(threads_wall_clock(&bench, runs[0].1[0].s_time));
    results.push(runtime_fuzz());
    results.push(error_propagation(&runs[0].1));
    results.push(determinism(&bench));

    for o in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let env = if o.environment { " [environment]" } else { "" };
        println!("{tag} {:<3} {}{env}: {}", o.id, o.name, o.detail);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    let hard = results.iter().filter(|o| !o.pass && !o.environment).count();
    println!(
        "{} of {} criteria passed ({} environment-limited) in {:.1?}",
        results.len() - failed,
        results.len(),
        failed - hard,
        start.elapsed()
    );
    if hard == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
