use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use copacrr::embedding::{build_querysim, build_sim_matrix};
use copacrr::model::{forward, ModelConfig};
use copacrr::numerics::Graph;
use copacrr::training::pair_loss_and_grad;
use copacrr_bench::{model, random_input, rng, text_fixture, uniform};

fn forward_default(c: &mut Criterion) {
    let config = ModelConfig::default();
    let params = model(&config, 1);
    let input = random_input(&mut rng(2), &config);
    c.bench_function("forward 16x800 Co-PACRR", |b| {
        b.iter(|| forward(black_box(&input), &params, &config, None).unwrap().rel)
    });
    let neg = random_input(&mut rng(3), &config);
    let perm: Vec<usize> = (0..config.query_len).rev().collect();
    c.bench_function("pair loss and gradient 16x800", |b| {
        b.iter(|| pair_loss_and_grad(&params, &config, black_box(&input), &neg, Some(&perm)).unwrap().0)
    });
}

fn conv(c: &mut Criterion) {
    let mut r = rng(4);
    let sim = uniform(&mut r, &[16, 800]);
    let kernels = uniform(&mut r, &[3, 3, 32]);
    c.bench_function("conv2d_same 16x800 g=3 f=32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(sim.clone());
            let k = g.constant(kernels.clone());
            let out = g.conv2d_same(x, k).unwrap();
            g.max_over_filters(out).unwrap()
        })
    });
}

fn similarity(c: &mut Criterion) {
    let (table, query, doc) = text_fixture(5000, 300, 6, 800);
    c.bench_function("sim matrix 16x800 d=300", |b| {
        b.iter(|| build_sim_matrix(black_box(&query), &doc, &table, 16, 800).unwrap())
    });
    c.bench_function("querysim 800 window 4 d=300", |b| {
        b.iter(|| build_querysim(black_box(&query), &doc, &table, 4, 800).unwrap())
    });
}

criterion_group!(benches, forward_default, conv, similarity);
criterion_main!(benches);
