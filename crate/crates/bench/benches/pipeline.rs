// SPDX-License-Identifier: Apache-2.0

use std::hint::black_box;

use craft_bench::{fixture_kb, fixture_series};
use craft_core::train::{backward, retrieve_windows, Batch};
use craft_core::{sliding_windows, CraftModel, ModelConfig, OpCounter, Retriever, SpectralTransform};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;

const L: usize = 336;
const H: usize = 96;

fn spectra(c: &mut Criterion) {
    let x: Vec<f64> = (0..720).map(|t| (t as f64 * 0.1).sin()).collect();
    let transform = SpectralTransform::new(720);
    c.bench_function("rfft_720_truncated_36", |b| b.iter(|| transform.truncated(black_box(&x), 36)));
}

fn retrieval(c: &mut Criterion) {
    let series = fixture_series(7, 2000).unwrap();
    let kb = fixture_kb(&series, L, H, 3, 17).unwrap();
    let retriever = Retriever::new(&kb);
    let windows = sliding_windows(&series, L, H, 50).unwrap();
    let mut group = c.benchmark_group("retrieval");
    group.sample_size(20);
    group.bench_function("one_window_all_channels", |b| {
        b.iter(|| {
            let mut counter = OpCounter::new(7);
            retriever.retrieve_all(windows[3].x, 1, None, &mut counter).unwrap()
        })
    });
    group.bench_function("shared_baseline", |b| {
        b.iter(|| retriever.retrieve_shared(windows[3].x, 1, None).unwrap())
    });
    group.finish();
}

fn model(c: &mut Criterion) {
    let series = fixture_series(7, 2000).unwrap();
    let kb = fixture_kb(&series, L, H, 3, 17).unwrap();
    let retriever = Retriever::new(&kb);
    let windows = sliding_windows(&series, L, H, 40).unwrap();
    let batch_windows = &windows[..16];
    let (refs, _) = retrieve_windows(&retriever, batch_windows, 1, true).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig {
        lookback: L,
        horizon: H,
        hidden: 512,
    };
    let model = CraftModel::init(cfg, 0.001, &mut rng).unwrap();
    let inputs: Vec<_> = batch_windows.iter().map(|w| w.x).collect();
    let targets: Vec<_> = batch_windows.iter().map(|w| w.y).collect();

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_batch16", |b| b.iter(|| model.forecast_batch(&inputs, &refs).unwrap()));
    group.bench_function("backward_batch16", |b| {
        b.iter_batched(
            || Batch {
                inputs: inputs.clone(),
                targets: targets.clone(),
                refs: refs.clone(),
            },
            |batch| backward(&model, &batch).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, spectra, retrieval, model);
criterion_main!(benches);
