//! Hot-path benchmarks: the per-clip training step, frozen text encoding,
//! greedy decoding, and the similarity-map sweep.
//!
//! Run with `cargo bench -p gaitvlm-bench`. Sample counts are kept small —
//! a single training step at default dimensions is tens of milliseconds.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use gaitvlm_bench::{seeded_matrix, seeded_vector};
use gaitvlm_core::decoder::{DecoderConfig, DecoderModel};
use gaitvlm_core::gaitparams::NormalizationStats;
use gaitvlm_core::harness::{clip_loss_graph, ExperimentConfig, Pipeline};
use gaitvlm_core::numtext::{build_num_basis, similarity_map, SlotTemplate, Vocabulary};

fn bench_clip_step(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let pipe = Pipeline::new(&cfg).unwrap();
    let store = pipe.init_trainable().unwrap();
    let frames = seeded_matrix(cfg.window, cfg.f_in, 7);

    let mut group = c.benchmark_group("training");
    group.sample_size(10).measurement_time(Duration::from_secs(12));
    group.bench_function("clip_forward_backward", |b| {
        b.iter(|| {
            let (g, loss) = clip_loss_graph(&pipe, &store, &frames, 1, None, None).unwrap();
            g.backward(loss).unwrap()
        })
    });
    group.finish();
}

fn bench_sentence_embedding(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let pipe = Pipeline::new(&cfg).unwrap();
    let stats = identity_stats();
    let text = "walking speed is 0.84 leg/sec, number of steps per minute is 101.4.";

    c.bench_function("sentence_embedding", |b| {
        b.iter(|| pipe.sentence_embedding(text, &stats).unwrap())
    });
}

fn identity_stats() -> NormalizationStats {
    let mut stats = NormalizationStats::from_parts(1, 0.0, 1.0, 1.0).unwrap();
    stats.extend(&NormalizationStats::from_parts(2, 0.0, 1.0, 1.0).unwrap());
    stats
}

fn bench_greedy_decode(c: &mut Criterion) {
    let vocab = Vocabulary::standard();
    let cfg = DecoderConfig::default();
    let dim = cfg.dim;
    let max_len = cfg.max_len;
    let model = DecoderModel::new(cfg, &vocab, 3).unwrap();
    let prefix = seeded_vector(dim, 11);

    let mut group = c.benchmark_group("decoder");
    group.sample_size(10).measurement_time(Duration::from_secs(12));
    group.bench_function("greedy_decode", |b| {
        b.iter(|| model.decode(&prefix, max_len).unwrap())
    });
    group.finish();
}

fn bench_similarity_map(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let pipe = Pipeline::new(&cfg).unwrap();
    let template = SlotTemplate::parse("walking speed is [value] leg/sec.", &pipe.vocab).unwrap();
    let basis = build_num_basis(cfg.dim, cfg.max_len, 5).unwrap();
    let grid: Vec<f64> = (0..101).map(|i| -2.5 + 0.05 * i as f64).collect();

    let mut group = c.benchmark_group("numtext");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    group.bench_function("similarity_map_101", |b| {
        b.iter(|| similarity_map(&template, &grid, &pipe.text_enc, &basis, &pipe.vocab).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_clip_step,
    bench_sentence_embedding,
    bench_greedy_decode,
    bench_similarity_map
);
criterion_main!(benches);
