use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use tsmoe_bench::{filler, toy_config};
use tsmoe_core::data::split_by_window_quality;
use tsmoe_core::model::SeqLayout;
use tsmoe_core::numerics::kernels::matmul;
use tsmoe_core::{ExpertParams, Graph, Model, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = filler(n * n, 1);
        let b = filler(n * n, 2);
        let mut out = vec![0.0f32; n * n];
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| matmul(black_box(&a), black_box(&b), &mut out, n, n, n))
        });
    }
    group.finish();
}

fn bench_routing(c: &mut Criterion) {
    let mut rng = init_rng();
    let cfg = toy_config();
    let ep = ExpertParams::<f32>::random(&mut rng, cfg.d_model, cfg.d_expert, cfg.num_experts, 0.2);
    let tokens = 1024;
    let x = Tensor::new(filler(tokens * cfg.d_model, 3), &[tokens, cfg.d_model]).unwrap();
    let mut group = c.benchmark_group("mixture");
    group.throughput(Throughput::Elements(tokens as u64));
    group.bench_function("route_top2", |b| b.iter(|| ep.route_topk(black_box(&x), cfg.top_k).unwrap()));
    let routing = ep.route_topk(&x, cfg.top_k).unwrap();
    group.bench_function("sparse_forward", |b| b.iter(|| ep.forward(black_box(&x), &routing).unwrap()));
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let model = Model::<f32>::new(toy_config(), 1).unwrap();
    let mut group = c.benchmark_group("model_forward");
    for len in [128usize, 512] {
        let values = filler(len, 4);
        let layout = SeqLayout::single(len);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let out = model.forward_graph(&mut g, black_box(&values), &layout, None).unwrap();
                black_box(g.value(out.heads[0])[0])
            })
        });
    }
    group.finish();
}

fn bench_cleaning(c: &mut Criterion) {
    let seq = filler(1 << 16, 5);
    let mut group = c.benchmark_group("cleaning");
    group.throughput(Throughput::Elements(seq.len() as u64));
    group.bench_function("window_quality_64k", |b| {
        b.iter(|| split_by_window_quality(black_box(&seq), 128, 0.2, 256))
    });
    group.finish();
}

fn init_rng() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

criterion_group!(benches, bench_matmul, bench_routing, bench_forward, bench_cleaning);
criterion_main!(benches);
