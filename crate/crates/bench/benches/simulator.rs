use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pipesim_core::dataset::generate;
use pipesim_core::{build_timeline, run_policy, PolicyKind, SimConfig, TrainConfig};

fn schedule_cfg(kind: PolicyKind) -> SimConfig {
    SimConfig {
        stages: 8,
        mini_batches: 32,
        micro_batches: 4,
        fwd_cost: 1,
        bwd_cost: 2,
        epochs: 1,
        seed: 0,
        policy: kind,
        lambda: Some(0.5),
    }
}

fn bench_schedules(c: &mut Criterion) {
    c.bench_function("build_1f1b s8 m32", |b| {
        let cfg = schedule_cfg(PolicyKind::PipeDream);
        b.iter(|| build_timeline(black_box(&cfg)))
    });
    c.bench_function("build_nf1b s8 m32 u4", |b| {
        let cfg = schedule_cfg(PolicyKind::TiMePReSt);
        b.iter(|| build_timeline(black_box(&cfg)))
    });
}

fn bench_epoch(c: &mut Criterion) {
    let cfg = SimConfig {
        stages: 4,
        mini_batches: 8,
        micro_batches: 2,
        fwd_cost: 1,
        bwd_cost: 2,
        epochs: 1,
        seed: 0,
        policy: PolicyKind::ITiMePReSt,
        lambda: Some(0.5),
    };
    let train = TrainConfig::default();
    let dataset = generate(
        train.generator,
        train.samples,
        train.input_dim,
        train.classes,
        cfg.seed,
    );
    c.bench_function("train epoch i-timeprest s4 m8", |b| {
        b.iter(|| run_policy(black_box(&cfg), &train, &dataset).unwrap())
    });
}

criterion_group!(benches, bench_schedules, bench_epoch);
criterion_main!(benches);
