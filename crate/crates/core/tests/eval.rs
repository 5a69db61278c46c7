mod common;

use pnfer_core::corpus::{descriptive_class_names, GeneratorConfig};
use pnfer_core::error::Error;
use pnfer_core::eval::{
    ablation_csv, ablation_grid, ablation_suite, confusion, evaluate, evaluate_samples, random_adapter_baseline,
    read_ablation_csv, render, uar, war, zero_shot_on, AblationCell, ZeroShotConfig,
};
use pnfer_core::fusion::SimilarityMode;
use pnfer_core::textproc::EmotionLexicon;
use pnfer_core::training::{train_on, TrainedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn war_matches_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 7;
    let preds: Vec<usize> = (0..1000).map(|_| rng.random_range(0..n)).collect();
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..n)).collect();
    let cm = confusion(&preds, &labels, n).unwrap();
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert_eq!(war(&cm).unwrap(), 100.0 * hits as f64 / 1000.0);
    let mut recall = 0.0;
    for k in 0..n {
        let rows: Vec<usize> = (0..1000).filter(|&i| labels[i] == k).collect();
        recall += rows.iter().filter(|&&i| preds[i] == k).count() as f64 / rows.len() as f64;
    }
    assert!((uar(&cm).unwrap() - 100.0 * recall / n as f64).abs() < 1e-9);
}

#[test]
fn duplicating_a_class_moves_war_but_not_uar() {
    let preds = vec![0, 0, 1, 0, 2, 2];
    let labels = vec![0, 0, 1, 1, 2, 2];
    let cm = confusion(&preds, &labels, 3).unwrap();
    let mut p2 = preds.clone();
    let mut l2 = labels.clone();
    // Class 1 (recall 50%) duplicated three times over.
    for _ in 0..3 {
        p2.extend([1, 0]);
        l2.extend([1, 1]);
    }
    let cm2 = confusion(&p2, &l2, 3).unwrap();
    assert!((uar(&cm).unwrap() - uar(&cm2).unwrap()).abs() < 1e-12);
    assert!((war(&cm).unwrap() - 5.0 / 6.0 * 100.0).abs() < 1e-12);
    assert!((war(&cm2).unwrap() - 8.0 / 12.0 * 100.0).abs() < 1e-12);
}

#[test]
fn evaluation_reads_but_never_writes_parameters() {
    let c = common::corpus(&common::tiny_generator(), 2);
    let cfg = common::tiny_train_config(2, 2);
    let lex = EmotionLexicon::default();
    let path = c.dir.path().join("m.ckpt");
    let out = train_on(&c.manifest, &c.train, &cfg, Some(&path), &lex).unwrap();
    let before = std::fs::read(&path).unwrap();
    let hash = out.trained.model.store.hash_where(|_| true);
    let r1 = evaluate(&path, &c.manifest, "test", SimilarityMode::PnDiff).unwrap();
    let r2 = evaluate_samples(&out.trained, &c.test, SimilarityMode::PnDiff, &lex).unwrap();
    assert_eq!(out.trained.model.store.hash_where(|_| true), hash);
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(r1, r2);
    r1.check().unwrap();
    assert_eq!(r1.num_samples, c.test.len());
    let pos_only = evaluate_samples(&out.trained, &c.test, SimilarityMode::PosOnly, &lex).unwrap();
    pos_only.check().unwrap();
}

#[test]
fn evaluating_on_a_differently_shaped_corpus_fails() {
    let c = common::corpus(&common::tiny_generator(), 3);
    let cfg = common::tiny_train_config(1, 3);
    let path = c.dir.path().join("m.ckpt");
    train_on(&c.manifest, &c.train, &cfg, Some(&path), &EmotionLexicon::default()).unwrap();
    let other = common::corpus(&GeneratorConfig { frames: 3, ..common::tiny_generator() }, 4);
    let err = evaluate(&path, &other.manifest, "test", SimilarityMode::PnDiff).err().unwrap();
    assert!(matches!(err, Error::ArchitectureMismatch(_)), "{err}");
}

#[test]
fn random_adapters_give_valid_reports() {
    let c = common::corpus(&common::tiny_generator(), 5);
    let cfg = common::tiny_train_config(1, 5);
    let lex = EmotionLexicon::default();
    let r = random_adapter_baseline(&c.manifest, &c.train, &c.test, &cfg, &lex).unwrap();
    r.check().unwrap();
    let init = TrainedModel::initialize(&c.manifest, &c.train, &cfg, &lex).unwrap();
    assert!(init.model.store.trainable_count() > 0);
}

fn descriptive_corpus(seed: u64) -> common::Corpus {
    let g = common::tiny_generator();
    common::corpus(&GeneratorConfig { class_names: Some(descriptive_class_names(&g)), ..g }, seed)
}

#[test]
fn zero_shot_rejects_shared_class_names() {
    let a = common::corpus(&common::tiny_generator(), 6);
    let b = common::corpus(&common::tiny_generator(), 7);
    let zc = ZeroShotConfig { pretrain_epochs: 0, ..ZeroShotConfig::default() };
    let err = zero_shot_on(&a.manifest, &a.train, &b.manifest, &b.train, &zc, &EmotionLexicon::default())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn zero_shot_scores_corpus_b_without_training_on_it() {
    let a = common::corpus(&common::tiny_generator(), 8);
    let b = descriptive_corpus(9);
    let mut zc = ZeroShotConfig { pretrain_epochs: 2, ..ZeroShotConfig::default() };
    zc.train.model = common::tiny_train_config(1, 8).model;
    zc.train.batch_size = 8;
    let mut b_all = b.train.clone();
    b_all.extend(b.test.clone());
    let out = zero_shot_on(&a.manifest, &a.train, &b.manifest, &b_all, &zc, &EmotionLexicon::default()).unwrap();
    out.report.check().unwrap();
    assert_eq!(out.report.class_names, b.manifest.class_names);
    assert_eq!(out.report.num_samples, b_all.len());
    assert_eq!(out.log.epochs.len(), 2);
    // Relabelling B changes the score, never the predictions.
    let mut shuffled = b_all.clone();
    for s in &mut shuffled {
        s.class_id = (s.class_id + 1) % 7;
    }
    let out2 = zero_shot_on(&a.manifest, &a.train, &b.manifest, &shuffled, &zc, &EmotionLexicon::default()).unwrap();
    let col_sums = |cm: &pnfer_core::eval::ConfusionMatrix| -> Vec<u64> {
        (0..7).map(|p| cm.counts.iter().map(|r| r[p]).sum()).collect()
    };
    assert_eq!(col_sums(&out.report.confusion), col_sums(&out2.report.confusion));
    assert_eq!(out.trained.model.store.hash_where(|_| true), out2.trained.model.store.hash_where(|_| true));
}

#[test]
fn ablation_cells_train_evaluate_and_render() {
    let c = common::corpus(&common::tiny_generator(), 10);
    let base = common::tiny_train_config(1, 10);
    let grid = ablation_grid(&base).unwrap();
    let pick: Vec<AblationCell> = grid
        .into_iter()
        .filter(|c| ["modalities-v", "weighting-fixed-0.3", "weighting-adaptive"].contains(&c.id.as_str()))
        .collect();
    let rows = ablation_suite(&pick, &c.manifest, &c.train, &c.test, 2).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].cell_id, "modalities-v");
    let csv = ablation_csv(&rows, &c.manifest.class_names).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("cell_id,config_delta,uar,war,acc_happiness"));
    let out = tempfile::tempdir().unwrap();
    let p = out.path().join("ablation.csv");
    std::fs::write(&p, &csv).unwrap();
    assert_eq!(read_ablation_csv(&p).unwrap().len(), 3);
    let files = render(&p, out.path()).unwrap();
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with("ablation_weight_sweep.svg")));
    for f in files {
        assert!(std::fs::metadata(&f).unwrap().len() > 0);
    }
}
