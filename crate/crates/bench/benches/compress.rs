use std::hint::black_box;

use attncomp::provider::synthetic::{synthetic_dataset, DatasetShape};
use attncomp::trainer::grad;
use attncomp::{
    compress, forward, segment_scores, CrossAttentionHead, Granularity, SegmentScores, SyntheticParams,
    SyntheticProvider, TopPConfig,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn topp(c: &mut Criterion) {
    let mut group = c.benchmark_group("topp");
    for n in [8usize, 64, 512] {
        let raw: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97 + 1) as f64).collect();
        let total: f64 = raw.iter().sum::<f64>() * 1.25;
        let docs: Vec<(String, f64)> = raw.iter().enumerate().map(|(i, r)| (format!("d{i}"), r / total)).collect();
        let scores = SegmentScores::from_doc_scores(0.2, docs);
        let config = TopPConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| compress(black_box(s), &config))
        });
    }
    group.finish();
}

fn head(c: &mut Criterion) {
    let shape = DatasetShape {
        relevant_per_sample: (1, 3),
        ..DatasetShape::default()
    };
    let sample = synthetic_dataset(1, 0, &shape, 3).remove(0);
    let provider = SyntheticProvider::new(SyntheticParams::default(), 1).unwrap();
    let bundle = provider.hidden(&sample, Granularity::DocumentLevel).unwrap();
    let labels = sample.relevance_labels.clone().unwrap();

    let mut group = c.benchmark_group("head");
    for d_a in [64usize, 256] {
        let h = CrossAttentionHead::init_random(4, bundle.d_model(), d_a, 5).unwrap();
        group.bench_with_input(BenchmarkId::new("forward_and_score", d_a), &h, |b, h| {
            b.iter(|| {
                let attn = forward(black_box(&bundle), h).unwrap();
                segment_scores(&attn, &bundle.layout).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("grad", d_a), &h, |b, h| {
            b.iter(|| grad(black_box(&bundle), h, &labels, 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, topp, head);
criterion_main!(benches);
