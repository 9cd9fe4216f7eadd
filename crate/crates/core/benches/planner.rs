use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tpsim::par::Exec;
use tpsim::policy::{plan_window, GreedyOptions, TierDemand};
use tpsim::profile::{a100_like, EnvelopeTable};
use tpsim::trace::SloTier;

fn planner(c: &mut Criterion) {
    let profile = a100_like();
    let tiers = [
        SloTier::new(0, "chat", 400.0, 30.0),
        SloTier::new(1, "code", 800.0, 40.0),
        SloTier::new(2, "summarize", 2000.0, 60.0),
        SloTier::new(3, "batch", 6000.0, 120.0),
    ];
    let lengths = [
        (512.0, 128.0),
        (1024.0, 256.0),
        (2048.0, 128.0),
        (1024.0, 512.0),
    ];
    let envs = EnvelopeTable::build(&profile, &tiers, |t| lengths[t as usize], 1.0).unwrap();
    let demands = [
        TierDemand::new(0, 80.0, 60.0),
        TierDemand::new(1, 40.0, 40.0),
        TierDemand::new(2, 30.0, 10.0),
        TierDemand::new(3, 20.0, 20.0),
    ];
    let mut g = c.benchmark_group("plan_window");
    for pool in [32u32, 128] {
        for (name, exec) in [
            ("sequential", Exec::Sequential),
            ("parallel", Exec::Parallel),
        ] {
            let opts = GreedyOptions {
                exec,
                ..Default::default()
            };
            g.bench_with_input(BenchmarkId::new(name, pool), &pool, |b, &pool| {
                b.iter(|| plan_window(&envs, &tiers, black_box(&demands), pool, None, &opts))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, planner);
criterion_main!(benches);
