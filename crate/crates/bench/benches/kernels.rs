use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xag_core::data::generate;
use xag_core::eval::{evaluate, Variant};
use xag_core::graph::{build_adjacency, gcn_forward, GcnParams};
use xag_core::losses::{cmpm_node, MatchLabels, DEFAULT_EPSILON};
use xag_core::pipeline::{train_stage1, train_stage2, StageTag};
use xag_core::{RunConfig, Tensor};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(64, 32, &mut rng);
    let b = random(32, 64, &mut rng);
    c.bench_function("matmul_64x32x64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));

    let nodes = random(3, 16, &mut rng);
    let params = GcnParams::init(16, 2, &mut rng).unwrap();
    let adjacency = build_adjacency(3).unwrap();
    c.bench_function("gcn_forward_3x16", |bench| {
        bench.iter(|| gcn_forward(black_box(&nodes), &adjacency, &params).unwrap())
    });

    let ids: Vec<u32> = (0..16).map(|i| i / 2).collect();
    let labels = MatchLabels::from_identities(&ids, &ids).unwrap();
    let v: Vec<Tensor> = (0..3).map(|_| random(16, 16, &mut rng)).collect();
    let t: Vec<Tensor> = (0..3).map(|_| random(16, 16, &mut rng)).collect();
    c.bench_function("cmpm_node_16x3x16", |bench| {
        bench.iter(|| cmpm_node(black_box(&v), black_box(&t), &labels, DEFAULT_EPSILON).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.set("stage1_iterations", "10").unwrap();
    cfg.set("stage2_iterations", "10").unwrap();
    let [train, _, test] = generate(&cfg.diversity(), &cfg.dims()).unwrap();
    let s1_cfg = cfg.stage(StageTag::Scfc);
    let s2_cfg = cfg.stage(StageTag::Attack);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("stage1_10_iterations", |bench| bench.iter(|| train_stage1(&s1_cfg, &train).unwrap()));
    let s1 = train_stage1(&s1_cfg, &train).unwrap();
    group.bench_function("stage2_10_iterations", |bench| {
        bench.iter_batched(|| s1.bundle.clone(), |p| train_stage2(&s2_cfg, &train, &p).unwrap(), BatchSize::SmallInput)
    });
    let s2 = train_stage2(&s2_cfg, &train, &s1.bundle).unwrap();
    group.bench_function("evaluate_attacked", |bench| {
        bench.iter(|| evaluate(&test, &s2.bundle, Variant::Attacked).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels, training);
criterion_main!(benches);
