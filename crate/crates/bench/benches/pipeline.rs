use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tsmoe_bench::{series, toy_config, toy_store};
use tsmoe_core::data::{sample_batch, step_rng};
use tsmoe_core::eval::LastValue;
use tsmoe_core::heads::{autoregressive_forecast, ForecastOptions};
use tsmoe_core::train::{TrainConfig, Trainer};
use tsmoe_core::Model;

fn bench_training_step(c: &mut Criterion) {
    let dir = tempfile_dir();
    let store = toy_store(&dir);
    let cfg = toy_config();
    let mut tc = TrainConfig::new(1_000_000, 8, 192);
    tc.warmup_steps = 10;
    tc.domain_weights.insert("sine".into(), 1.0);
    let mut trainer = Trainer::new(Model::new(cfg.clone(), 0).unwrap(), tc.clone()).unwrap();
    let batch = trainer.batch_for(&store, 1).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("sample_batch_8x192", |b| {
        let mut step = 0;
        b.iter(|| {
            step += 1;
            let mut rng = step_rng(0, step);
            sample_batch(&store, &mut rng, 8, 192, &tc.domain_weights, &cfg.head_horizons).unwrap()
        })
    });
    group.bench_function("step_8x192", |b| b.iter(|| trainer.step_on(black_box(&batch)).unwrap()));
    group.finish();
    let _ = std::fs::remove_dir_all(&dir);
}

fn bench_forecast(c: &mut Criterion) {
    let model = Model::<f32>::new(toy_config(), 0).unwrap();
    let context = series(512, 3);
    let mut group = c.benchmark_group("forecast");
    group.sample_size(20);
    for h in [96usize, 336] {
        group.bench_function(format!("model_h{h}"), |b| {
            b.iter(|| autoregressive_forecast(&model, black_box(&context), h, ForecastOptions::default()).unwrap())
        });
    }
    group.bench_function("last_value_h96", |b| {
        b.iter(|| autoregressive_forecast(&LastValue, black_box(&context), 96, ForecastOptions::default()).unwrap())
    });
    group.finish();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tsmoe-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

criterion_group!(benches, bench_training_step, bench_forecast);
criterion_main!(benches);
