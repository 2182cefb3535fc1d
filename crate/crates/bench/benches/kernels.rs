use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use incalign::cascade::adapt_stage;
use incalign::evaluator::{EvaluatorNet, EvaluatorSample, Label, Wiring};
use incalign::hog::{extract_features, HogLayout};
use incalign::synth::generate_training_set;
use incalign::{skl_update, SynthConfig};
use incalign_bench::{batch, online_rows, stage, subspace};

fn skl(c: &mut Criterion) {
    let mut g = c.benchmark_group("skl_update");
    for n in [1, 10, 40] {
        let (state, b) = (subspace(4096, 10, 8715), batch(4096, n));
        g.bench_with_input(BenchmarkId::new("d4096_n", n), &n, |bench, _| bench.iter(|| black_box(skl_update(&state, &b, 1.0).unwrap())));
    }
    g.finish();
}

fn regression(c: &mut Criterion) {
    let mut g = c.benchmark_group("adapt_stage");
    for dim in [128, 512] {
        let s = stage(dim, 2 * dim);
        let (x, y) = online_rows(dim, 10);
        g.bench_with_input(BenchmarkId::new("n10_D", dim), &dim, |bench, _| bench.iter(|| black_box(adapt_stage(&s, &x, &y).unwrap())));
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let data = generate_training_set(&SynthConfig::default(), 1).unwrap();
    let (image, shape) = &data[0];
    let layout = HogLayout::default();
    c.bench_function("hog_descriptor", |b| b.iter(|| black_box(extract_features(image, shape.point(0), &layout).unwrap())));
    let net = EvaluatorNet::new(Wiring::InputConcat, 64, 1, 1).unwrap();
    let sample = EvaluatorSample::new(image, shape, Label::Aligned, 64, 1).unwrap();
    c.bench_function("evaluator_forward", |b| b.iter(|| black_box(net.forward(&sample).unwrap())));
}

criterion_group!(benches, skl, regression, features);
criterion_main!(benches);
