use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dipaco_core::autodiff::Graph;
use dipaco_core::data::{generate, CorpusConfig};
use dipaco_core::model::{init_params, loss_and_grad, LmConfig, Token};
use dipaco_core::modular::{materialize_path, ModularConfig, ModuleStore};
use dipaco_core::optim::{adamw_step, AdamWConfig, AdamWState, OuterConfig};
use dipaco_core::routing::kmeans_fit;
use dipaco_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("graph_matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::filled(&[n, n], 0.5);
        let b = Tensor::filled(&[n, n], 0.25);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut graph = Graph::new();
                let x = graph.param("a", a.clone());
                let y = graph.constant(b.clone());
                let z = graph.matmul(x, y).unwrap();
                let s = graph.scale(z, 1.0);
                black_box(graph.value(s));
            })
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let lm = LmConfig::default();
    let corpus = generate(&CorpusConfig {
        seqs_per_domain: 4,
        ..CorpusConfig::default()
    })
    .unwrap();
    let batch: Vec<&[Token]> = (0..4).map(|d| corpus.seq(d)).collect();
    let mut params = init_params(&lm).unwrap();
    let mut state = AdamWState::new(&params, AdamWConfig::default());
    c.bench_function("train_step_seq64_batch4", |b| {
        b.iter(|| {
            let (_, g) = loss_and_grad(&params, &lm, &batch, 32).unwrap();
            adamw_step(&mut params, &g, &mut state).unwrap();
        })
    });
    c.bench_function("forward_backward_seq64_batch4", |b| {
        b.iter(|| black_box(loss_and_grad(&params, &lm, &batch, 32).unwrap()))
    });
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..32).map(|_| rng.random::<f64>()).collect())
        .collect();
    c.bench_function("kmeans_2000x32_k4", |b| {
        b.iter(|| kmeans_fit(black_box(&points), 4, 20, 1).unwrap())
    });
}

fn bench_materialize(c: &mut Criterion) {
    let lm = LmConfig::default();
    let cfg = ModularConfig::for_lm(&lm, &[2, 2]).unwrap();
    let init = init_params(&lm).unwrap();
    let store = ModuleStore::from_init(&cfg, &init, OuterConfig::default()).unwrap();
    c.bench_function("materialize_path_2x2", |b| {
        b.iter(|| materialize_path(&store, &cfg, black_box(3)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_train_step,
    bench_kmeans,
    bench_materialize
);
criterion_main!(benches);
