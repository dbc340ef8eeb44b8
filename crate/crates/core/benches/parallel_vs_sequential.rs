use avsep::eval::{evaluate_items, Estimator};
use avsep::model::{Model, ModelConfig};
use avsep::par;
use avsep::synth::{synth_item, CorpusConfig, LoadedItem};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup() -> (Model<f32>, Vec<LoadedItem>) {
    let cfg = ModelConfig::toy();
    let corpus = CorpusConfig {
        num_items: 4,
        duration_s: 0.48,
        visual_dim: cfg.visual_dim,
        ..Default::default()
    };
    let items = (0..corpus.num_items)
        .map(|i| synth_item(&corpus, i).unwrap().1)
        .collect();
    (Model::new(cfg, 0).unwrap(), items)
}

fn bench(c: &mut Criterion) {
    let (model, items) = setup();
    let est = Estimator::Model(&model);
    let mut g = c.benchmark_group("separate_and_score");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("path", "parallel"), |b| {
        b.iter(|| evaluate_items(&est, &items))
    });
    g.bench_function(BenchmarkId::new("path", "sequential"), |b| {
        b.iter(|| par::sequential(|| evaluate_items(&est, &items)))
    });
    g.finish();

    let mut g = c.benchmark_group("synthesize_items");
    let corpus = CorpusConfig {
        num_items: 8,
        duration_s: 1.0,
        visual_dim: 32,
        ..Default::default()
    };
    let run = || par::map_indexed(corpus.num_items, |i| synth_item(&corpus, i).unwrap().1.mixture.len());
    g.bench_function(BenchmarkId::new("path", "parallel"), |b| b.iter(run));
    g.bench_function(BenchmarkId::new("path", "sequential"), |b| b.iter(|| par::sequential(run)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
