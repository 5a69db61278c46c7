use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use pnfer_bench::fixture;
use pnfer_core::eval::{confusion, uar};
use pnfer_core::fusion::{FusionGraph, ModalitySet, SimilarityMode, Weighting};
use pnfer_core::netcore::Tape;
use pnfer_core::textproc::refine_description;
use pnfer_core::training::tape_loss;

fn forward_backward(c: &mut Criterion) {
    let fx = fixture(3);
    let model = &fx.trained.model;
    let batch: Vec<_> = fx.inputs.iter().take(16).collect();
    let labels: Vec<usize> = fx.samples.iter().take(16).map(|s| s.class_id).collect();
    let (pos_t, neg_t) = fx.trained.label_tokens(&fx.trained.class_names).unwrap();

    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.throughput(Throughput::Elements(batch.len() as u64));
    group.bench_function("encode_batch_16", |b| b.iter(|| model.encode_batch(&batch).unwrap()));
    group.bench_function("video_tower_16", |b| {
        b.iter(|| {
            let mut tape = Tape::no_grad();
            model.video_embeddings(&mut tape, &batch)
        })
    });
    group.bench_function("train_step_16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (pos, neg) = model.label_embeddings(&mut tape, &pos_t, &neg_t).unwrap();
            let embs = model.modality_vars(&mut tape, &batch, [true; 4]).unwrap();
            let g = FusionGraph::build(
                &mut tape,
                embs,
                pos,
                neg,
                ModalitySet::FULL,
                Weighting::default(),
                SimilarityMode::PnDiff,
            )
            .unwrap();
            let loss = tape_loss(&mut tape, &g, &labels, 0.01).unwrap();
            tape.backward(loss.total)
        })
    });
    group.finish();
}

fn text_and_metrics(c: &mut Criterion) {
    let fx = fixture(3);
    let texts: Vec<&str> = fx.samples.iter().map(|s| s.description.as_str()).collect();
    let mut group = c.benchmark_group("text");
    group.throughput(Throughput::Elements(texts.len() as u64));
    group.bench_function("refine_corpus", |b| {
        b.iter(|| texts.iter().map(|t| refine_description(t, &fx.lexicon).0.len()).sum::<usize>())
    });
    group.finish();

    let preds: Vec<usize> = (0..10_000).map(|i| (i * 7 + i / 3) % 7).collect();
    let labels: Vec<usize> = (0..10_000).map(|i| i % 7).collect();
    c.bench_function("uar_10k", |b| {
        b.iter_batched(
            || (preds.clone(), labels.clone()),
            |(p, l)| uar(&confusion(&p, &l, 7).unwrap()).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward_backward, text_and_metrics);
criterion_main!(benches);
