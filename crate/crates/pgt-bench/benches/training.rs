//! One optimizer-step worth of gradient work on a 36-frame sequence:
//! progressive accumulation over five 8-frame steps against a single
//! whole-sequence backward. The interesting axis is memory, not time, but
//! the serial steps must not cost much either.

use criterion::{criterion_group, criterion_main, Criterion};

use pgt_bench::{bench_model, bench_sequence, NUM_STEPS, TOTAL_FRAMES, T_PRIME};
use pgt_core::make_schedule;
use pgt_core::train::{integrated_accumulate, progressive_accumulate};
use pgt_core::StepLossMode;

fn accumulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("accumulate-36-frames");
    let schedule = make_schedule(T_PRIME, NUM_STEPS).unwrap();
    let x = bench_sequence::<f32>(TOTAL_FRAMES);

    let mut model = bench_model::<f32>();
    group.bench_function("progressive-8x5", |b| {
        b.iter(|| {
            progressive_accumulate(&mut model, &x, 0, &schedule, StepLossMode::Mean).unwrap();
            model.store.zero_grads();
        })
    });

    let mut model = bench_model::<f32>();
    group.bench_function("integrated", |b| {
        b.iter(|| {
            integrated_accumulate(&mut model, &x, 0).unwrap();
            model.store.zero_grads();
        })
    });

    group.finish();
}

criterion_group!(benches, accumulate);
criterion_main!(benches);
