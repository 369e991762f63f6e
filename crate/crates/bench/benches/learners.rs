use std::hint::black_box;
use std::sync::Arc;

use corrdemo::batch::{expected_loss_exact, train_o2b};
use corrdemo::mle::mle_unif;
use corrdemo::sim::{run_online, sample_dataset, LearnerSpec, RunOptions, SequenceSource};
use corrdemo::weights::{EvalMode, Hyperparams};
use corrdemo_bench::fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn online(c: &mut Criterion) {
    let mut group = c.benchmark_group("online_run");
    for size in [16usize, 256, 1024] {
        let inst = fixture(8, 4, size, 1);
        for (name, mode) in [("exact", EvalMode::Exact), ("logfloat", EvalMode::LogFloat)] {
            let opts = RunOptions { mode, record_weights: false, seed: 0 };
            let learner = LearnerSpec::Weighted(Hyperparams::realizable());
            group.bench_with_input(BenchmarkId::new(name, size), &size, |b, _| {
                b.iter(|| run_online(&inst, &learner, SequenceSource::Sampled { m: 64, seed: 3 }, &opts).unwrap())
            });
        }
    }
    group.finish();
}

fn batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("online_to_batch");
    let inst = fixture(6, 3, 128, 2);
    for m in [8usize, 64] {
        let data = sample_dataset(&inst, m, 9).unwrap();
        group.bench_with_input(BenchmarkId::new("train_and_evaluate", m), &m, |b, _| {
            b.iter(|| {
                let mix = train_o2b(Arc::clone(&inst.class), &data, Hyperparams::realizable(), EvalMode::Exact).unwrap();
                black_box(expected_loss_exact(&mix, &inst.dist, inst.truth()))
            })
        });
    }
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let inst = fixture(10, 5, 512, 4);
    let data = sample_dataset(&inst, 200, 5).unwrap();
    c.bench_function("mle_unif_512", |b| b.iter(|| black_box(mle_unif(&inst.class, &data))));
}

criterion_group!(benches, online, batch, likelihood);
criterion_main!(benches);
