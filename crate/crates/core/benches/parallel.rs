//! Rayon pool against a single worker on the same workloads.

use criterion::{criterion_group, criterion_main, Criterion};
use parahydra::config::ModelConfig;
use parahydra::model::Codec;
use parahydra::par;
use parahydra::synthetic::{gen_synthetic_views, SceneSpec};
use parahydra::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[4, 32, 64, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    let mut g = c.benchmark_group("conv2d 4x32x64x64");
    g.bench_function("pool", |b| b.iter(|| x.conv2d(&w, None, 1, 1, 1).unwrap()));
    g.bench_function("single", |b| b.iter(|| par::single_threaded(|| x.conv2d(&w, None, 1, 1, 1).unwrap())));
    g.finish();
}

fn encode(c: &mut Criterion) {
    let codec = Codec::new(&ModelConfig::desk(), 0).unwrap();
    let views = gen_synthetic_views(1, &SceneSpec::new(4, 64, 64, 3)).unwrap();
    let mut g = c.benchmark_group("encode 4 views 64x64");
    g.sample_size(10);
    g.bench_function("pool", |b| b.iter(|| codec.encode(&views, 0).unwrap()));
    g.bench_function("single", |b| b.iter(|| par::single_threaded(|| codec.encode(&views, 0).unwrap())));
    g.finish();
}

criterion_group!(benches, conv, encode);
criterion_main!(benches);
