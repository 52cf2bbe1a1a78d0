//! Rayon fan-out against the sequential fallback on the two hot loops:
//! label construction and one decision-focused epoch.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use storbid::domain::StorageParams;
use storbid::exec;
use storbid::loss::LossConfig;
use storbid::pipeline::{build_dataset, train_decision_focused, TrainConfig};
use storbid::predictor::{pretrain_mse, NetSpec, PretrainConfig};
use storbid::synth::{generate, SynthConfig};

fn bench(c: &mut Criterion) {
    let params = StorageParams::default();
    let series = generate(&SynthConfig { days: 8, ..SynthConfig::default() }).unwrap();
    let ds = build_dataset(&series, &params, 24, 1).unwrap();
    let (pred, _) = pretrain_mse(&ds, &NetSpec::new(vec![72, 32, 24], 0), &PretrainConfig { epochs: 5, ..Default::default() }).unwrap();
    let train = TrainConfig { epochs: 1, batch: 32, lr: 1e-4, seed: 0, ..Default::default() };
    let loss = LossConfig::default();

    let mut g = c.benchmark_group("dataset");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| build_dataset(&series, &params, 24, 1).unwrap()));
    g.bench_function("sequential", |b| b.iter(|| exec::sequential(|| build_dataset(&series, &params, 24, 1).unwrap())));
    g.finish();

    let mut g = c.benchmark_group("df_epoch");
    g.sample_size(10);
    let run = |seq: bool| {
        let f = || train_decision_focused(&ds, pred.clone(), &params, &loss, &train).unwrap();
        if seq {
            exec::sequential(f)
        } else {
            f()
        }
    };
    g.bench_function("parallel", |b| b.iter_batched(|| (), |_| run(false), BatchSize::PerIteration));
    g.bench_function("sequential", |b| b.iter_batched(|| (), |_| run(true), BatchSize::PerIteration));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
