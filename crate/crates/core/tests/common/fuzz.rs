//! Invariant fuzzing of the lockstep pipelined trainer.

use std::collections::BTreeSet;

use mrem::metrics::NullSink;
use mrem::parallel::LockstepRunner;
use mrem::partition::partition_layers;
use mrem::sequential::TrainConfig;
use mrem::{BitWidths, Network, QuantPlan, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomized lockstep runs totalling `total` ticks. After every tick: queues
/// stay within capacity, staleness is bounded, each queued pair matches the
/// full-precision activation of its own batch, and parameter ownership is
/// disjoint with the frozen full-precision model untouched.
pub fn lockstep_fuzz(total: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ticks = 0;
    let mut run = 0;
    while ticks < total {
        let layers = rng.gen_range(1..=5);
        let modules = rng.gen_range(1..=layers.min(4));
        let t0 = rng.gen_range(1..=5);
        let steps = rng.gen_range(60..=140).min(total - ticks);
        let (_, calib) = super::tiny_data(run, 40);
        let fp = Transformer::<f32>::new_random(super::tiny_config(layers), run).unwrap();
        let fp_hash = fp.params.fingerprint(&fp.params.param_names());
        let cfg = TrainConfig {
            steps,
            batch_size: rng.gen_range(1..=4),
            modules,
            queue_capacity: t0,
            plan: QuantPlan::new(BitWidths::new(rng.gen_range(2..=4), 4, 8)),
            init_examples: 8,
            lr: 1e-3,
            seed: run,
            ..TrainConfig::default()
        };
        let partition = partition_layers(layers, modules).unwrap();
        let mut runner = LockstepRunner::new(&fp, &calib, &cfg).unwrap();
        assert_eq!(runner.warmup_forwards(), if modules > 1 { modules * t0 } else { 0 });
        for tick in 0..steps {
            let before: Vec<Vec<(u64, u64)>> = runner
                .queues()
                .iter()
                .map(|q| q.iter().map(|e| (e.batch_id, e.stamp)).collect())
                .collect();
            runner.tick(&mut NullSink).unwrap();
            let now = (if modules > 1 { t0 } else { 0 } + tick + 1) as u64;

            for q in runner.queues() {
                assert!(q.len() <= t0);
                let stamps = q.stamps();
                assert!(stamps.windows(2).all(|w| w[0] < w[1]), "queue out of order: {stamps:?}");
            }
            assert_eq!(runner.last_samples().len(), modules - 1);
            for s in runner.last_samples() {
                assert!(
                    s.staleness >= 1 && s.staleness <= t0 as u64,
                    "staleness {}",
                    s.staleness
                );
                assert_eq!(s.stamp + s.staleness, now);
                assert!(
                    before[s.module - 1].contains(&(s.batch_id, s.stamp)),
                    "sample not from the queue"
                );
            }

            if tick % 10 == 0 || tick + 1 == steps {
                for (n, q) in runner.queues().iter().enumerate() {
                    let end = partition.layers(n).end;
                    for e in q.iter() {
                        let tokens = calib.batch(&e.rows).unwrap();
                        let f0 = fp.embed(&tokens).unwrap();
                        let f = fp.forward_layers(&f0, 0..end).unwrap().pop().unwrap();
                        assert_eq!(f, e.f, "queued f does not belong to batch {}", e.batch_id);
                        assert_eq!(e.f.shape(), e.fhat.shape());
                    }
                }
                let mut seen = BTreeSet::new();
                for (n, m) in runner.modules().iter().enumerate() {
                    for name in m.params.names() {
                        assert_eq!(partition.owner(name), Some(n), "{name} held by module {n}");
                        assert!(seen.insert(name.to_owned()), "{name} held twice");
                    }
                }
            }
            assert_eq!(fp.params.fingerprint(&fp.params.param_names()), fp_hash);
        }
        ticks += steps;
        run += 1;
    }
    assert_eq!(ticks, total);
}
