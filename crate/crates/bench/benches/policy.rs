use criterion::{criterion_group, criterion_main, Criterion};
use cotnav_bench::fixture;
use cotnav_core::envworld::generate_world;
use cotnav_core::policy::act;
use cotnav_core::trainer::{stage1_loss, TrainConfig};

fn world_generation(c: &mut Criterion) {
    c.bench_function("generate_world/20 nodes", |b| b.iter(|| generate_world(7, 20, 3.0, 48).unwrap()));
}

fn policy(c: &mut Criterion) {
    let (vocab, params, samples) = fixture();
    let batch: Vec<_> = samples.iter().take(16).collect();
    let cfg = TrainConfig::default();
    c.bench_function("stage1_loss/forward+backward batch 16", |b| {
        b.iter(|| stage1_loss(&params, &vocab, &batch, true, &cfg, true).unwrap())
    });
    c.bench_function("act/action only", |b| b.iter(|| act(&params, &vocab, &samples[0].prompt, None).unwrap()));
    c.bench_function("act/action + 64-token reasoning", |b| {
        b.iter(|| act(&params, &vocab, &samples[0].prompt, Some(64)).unwrap())
    });
}

criterion_group!(benches, world_generation, policy);
criterion_main!(benches);
