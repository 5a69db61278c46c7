//! Recall metrics, supervised and zero-shot evaluation, the ablation grid
//! and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{load_all, DatasetManifest, SampleRecord};
use crate::encoders::{Model, PNTextEmbeddings, SampleInputs};
use crate::error::{Error, Result};
use crate::fusion::{FusionGraph, Modality, ModalitySet, SimilarityMode, Weighting};
use crate::netcore::{Tape, Var};
use crate::textproc::{build_vocab, expand_pn_templates, refine_description, EmotionLexicon, TokenSequence};
use crate::training::{
    epoch_batches, predict, prompt_tokens, train_on, Sgd, TrainConfig, TrainLog, TrainedModel,
};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape("predictions vs labels", labels.len(), preds.len()));
    }
    let mut counts = vec![vec![0u64; n]; n];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= n || t >= n {
            return Err(Error::Invalid(format!("class id {} out of range for {n} classes", p.max(t))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Recall per class in percent; an empty row is an error.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    let empty: Vec<usize> = (0..cm.num_classes()).filter(|&k| cm.row_total(k) == 0).collect();
    if !empty.is_empty() {
        return Err(Error::Invalid(format!("no samples for classes {empty:?}")));
    }
    Ok((0..cm.num_classes())
        .map(|k| 100.0 * cm.counts[k][k] as f64 / cm.row_total(k) as f64)
        .collect())
}

/// Mean of per-class recalls, in percent.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    let acc = per_class_accuracy(cm)?;
    Ok(uar_from_recalls(&acc))
}

pub fn uar_from_recalls(recalls: &[f64]) -> f64 {
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Overall accuracy, in percent.
pub fn war(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn fingerprint(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: SimilarityMode,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub uar: f64,
    pub war: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub mean_weights: [f64; 4],
    /// Mean fused cosine to the true class's positive prompt, per class.
    pub class_pos_similarity: Vec<f64>,
    /// Mean fused cosine to the true class's negative prompt, per class.
    pub class_neg_similarity: Vec<f64>,
    pub fingerprint: String,
}

impl EvalReport {
    /// Checks the identities every report must satisfy.
    pub fn check(&self) -> Result<()> {
        let u = uar_from_recalls(&self.per_class_accuracy);
        if (u - self.uar).abs() > 1e-9 {
            return Err(Error::Invalid(format!("uar {} differs from mean recall {u}", self.uar)));
        }
        if (war(&self.confusion)? - self.war).abs() > 1e-9 || self.confusion.total() != self.num_samples as u64 {
            return Err(Error::Invalid("war inconsistent with confusion matrix".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            field: "report".into(),
            reason: e.to_string(),
        })
    }
}

fn build_report(
    trained: &TrainedModel,
    pn: &PNTextEmbeddings,
    inputs: &[SampleInputs],
    labels: &[usize],
    class_names: &[String],
    mode: SimilarityMode,
) -> Result<EvalReport> {
    let n = class_names.len();
    if pn.num_classes() != n {
        return Err(Error::shape("class prompts", n, pn.num_classes()));
    }
    let pred = predict(trained, pn, inputs, mode)?;
    let cm = confusion(&pred.predicted, labels, n)?;
    let per_class = per_class_accuracy(&cm)?;
    let s = inputs.len() as f64;
    let mut mean_weights = [0.0; 4];
    for w in &pred.weights {
        for (a, v) in mean_weights.iter_mut().zip(w.w) {
            *a += v / s;
        }
    }
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for (i, &y) in labels.iter().enumerate() {
        pos[y] += pred.fused_pos[i][y];
        neg[y] += pred.fused_neg[i][y];
    }
    for k in 0..n {
        let c = cm.row_total(k) as f64;
        pos[k] /= c;
        neg[k] /= c;
    }
    let ids_hash = fingerprint(&json!({
        "weights": trained.model.store.hash_where(|_| true),
        "mode": mode,
        "classes": class_names,
        "labels": labels,
    }));
    let report = EvalReport {
        mode,
        num_samples: inputs.len(),
        class_names: class_names.to_vec(),
        uar: uar_from_recalls(&per_class),
        war: war(&cm)?,
        per_class_accuracy: per_class,
        confusion: cm,
        mean_weights,
        class_pos_similarity: pos,
        class_neg_similarity: neg,
        fingerprint: ids_hash,
    };
    report.check()?;
    Ok(report)
}

/// Supervised evaluation of loaded samples against the model's own classes.
pub fn evaluate_samples(
    trained: &TrainedModel,
    samples: &[SampleRecord],
    mode: SimilarityMode,
    lexicon: &EmotionLexicon,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let inputs = trained.prepare_all(samples, lexicon)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let pn = trained.class_embeddings(&trained.class_names)?;
    build_report(trained, &pn, &inputs, &labels, &trained.class_names, mode)
}

/// Evaluates a checkpoint on the `split` part of a corpus.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, split: &str, mode: SimilarityMode) -> Result<EvalReport> {
    let trained = TrainedModel::load(checkpoint)?;
    check_compatible(&trained, manifest)?;
    let samples = load_all(&manifest.subset(split))?;
    evaluate_samples(&trained, &samples, mode, &EmotionLexicon::default())
}

fn check_compatible(trained: &TrainedModel, manifest: &DatasetManifest) -> Result<()> {
    let c = &trained.model.config;
    let g = &manifest.generator_config;
    let want = (c.frames, c.height, c.image_width, c.channels, c.regions);
    let got = (g.frames, g.height, g.width, g.channels, g.regions);
    if want != got {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint expects (frames, height, width, channels, regions) = {want:?}, corpus has {got:?}"
        )));
    }
    if trained.class_names != manifest.class_names {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint classes {:?} differ from corpus classes {:?}",
            trained.class_names, manifest.class_names
        )));
    }
    Ok(())
}

/// An untrained model whose adapters have random (non-identity)
/// up-projections; a chance-level reference.
pub fn random_adapter_baseline(
    train: &DatasetManifest,
    train_samples: &[SampleRecord],
    test_samples: &[SampleRecord],
    config: &TrainConfig,
    lexicon: &EmotionLexicon,
) -> Result<EvalReport> {
    let mut trained = TrainedModel::initialize(train, train_samples, config, lexicon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let adapters: Vec<_> = trained.model.adapters().into_iter().cloned().collect();
    for a in adapters {
        a.randomize_up(&mut trained.model.store, 0.02, &mut rng);
    }
    evaluate_samples(&trained, test_samples, SimilarityMode::PnDiff, lexicon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    /// Caption-pretraining epochs on corpus A; 0 gives the untrained control.
    pub pretrain_epochs: usize,
    pub mode: SimilarityMode,
    /// Optimizer, temperature, seed and architecture.
    pub train: TrainConfig,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            pretrain_epochs: 30,
            // Negated prompts never occur in captions, so the caption tower
            // has no notion of negation to subtract.
            mode: SimilarityMode::PosOnly,
            train: TrainConfig {
                learning_rate: 3e-3,
                modalities: ModalitySet([true, true, true, false]),
                ..TrainConfig::default()
            },
        }
    }
}

/// Outcome of the cross-corpus protocol.
pub struct ZeroShotOutcome {
    pub report: EvalReport,
    pub log: TrainLog,
    pub trained: TrainedModel,
}

/// Symmetric batch contrastive loss between `a` and `b` (`[B × e]` each),
/// matched by row.
pub fn tape_contrastive(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Var {
    let n = tape.value(a).rows;
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let ab = tape.matmul(an, bn, true);
    let ab = tape.scale(ab, 1.0 / tau);
    let ba = tape.matmul(bn, an, true);
    let ba = tape.scale(ba, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let l1 = tape.cross_entropy_rows(ab, targets.clone());
    let l2 = tape.cross_entropy_rows(ba, targets);
    let s1 = tape.sum_all(l1);
    let s2 = tape.sum_all(l2);
    let s = tape.add(s1, s2);
    tape.scale(s, 0.5 / n as f64)
}

/// Pretrains on corpus `a` with caption supervision, then classifies corpus
/// `b` from its class names alone. `b`'s labels are only used for scoring.
pub fn zero_shot(a: &DatasetManifest, b: &DatasetManifest, config: &ZeroShotConfig) -> Result<ZeroShotOutcome> {
    let a_samples = load_all(a)?;
    let b_samples = load_all(b)?;
    zero_shot_on(a, &a_samples, b, &b_samples, config, &EmotionLexicon::default())
}

pub fn zero_shot_on(
    a: &DatasetManifest,
    a_samples: &[SampleRecord],
    b: &DatasetManifest,
    b_samples: &[SampleRecord],
    config: &ZeroShotConfig,
    lexicon: &EmotionLexicon,
) -> Result<ZeroShotOutcome> {
    let tc = &config.train;
    tc.validate()?;
    let overlap: Vec<&String> = b.class_names.iter().filter(|n| a.class_names.contains(n)).collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!("class names shared by both corpora: {overlap:?}")));
    }
    if a_samples.is_empty() || b_samples.is_empty() {
        return Err(Error::Invalid("both corpora need samples".into()));
    }
    let active = ModalitySet([true, true, true, false]);

    // Vocabulary from corpus A only: its captions and its prompts.
    let (pos, neg) = expand_pn_templates(&a.class_names, &tc.negation_word)?;
    let captions: Vec<String> = a_samples
        .iter()
        .map(|s| if tc.refine_descriptions { refine_description(&s.description, lexicon).0 } else { s.description.clone() })
        .collect();
    let vocab = build_vocab(
        pos.iter()
            .chain(&neg)
            .chain(&captions)
            .map(String::as_str)
            .chain([crate::textproc::FALLBACK_DESCRIPTION]),
    );
    let model = Model::new(tc.resolve_model(a, vocab.len()))?;
    let mut trained = TrainedModel {
        model,
        vocab,
        class_names: a.class_names.clone(),
        negation_word: tc.negation_word.clone(),
        refine_descriptions: tc.refine_descriptions,
        modalities: active,
        weighting: tc.weighting,
        tau: tc.tau,
    };
    let inputs = trained.prepare_all(a_samples, lexicon)?;
    let mut log = TrainLog {
        trainable_params: trained.model.store.trainable_count(),
        total_params: trained.model.store.total_count(),
        ..TrainLog::default()
    };
    let mut sgd = Sgd::new(tc.learning_rate, tc.momentum);
    for epoch in 1..=config.pretrain_epochs {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(inputs.len(), tc.batch_size, tc.seed, epoch) {
            if batch.len() < 2 {
                continue;
            }
            let refs: Vec<&SampleInputs> = batch.iter().map(|&i| &inputs[i]).collect();
            let mut tape = Tape::new();
            let m = &trained.model;
            let [v, p, l, f] = m.modality_vars(&mut tape, &refs, [true; 4])?;
            // Equal weights over the video-side modalities.
            let vp = tape.add(v.expect("video"), p.expect("parsing"));
            let vpl = tape.add(vp, l.expect("landmark"));
            let fused = tape.scale(vpl, 1.0 / 3.0);
            let loss = tape_contrastive(&mut tape, fused, f.expect("description"), tc.tau);
            let lv = tape.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
            }
            loss_sum += lv * batch.len() as f64;
            let grads = tape.backward(loss);
            sgd.step(&mut trained.model.store, grads.params())?;
        }
        log.epochs.push(crate::training::EpochLog {
            epoch,
            loss: loss_sum / inputs.len() as f64,
            fused_loss: 0.0,
            modality_loss: [None; 4],
            mean_weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
            train_accuracy: 0.0,
        });
    }

    // Corpus B: prompts through the caption tower, no parameter updates.
    let (bp, bn) = prompt_tokens(&b.class_names, &tc.negation_word, &trained.vocab, trained.model.config.description_max_len)?;
    let pn = description_prompts(&trained.model, &bp, &bn)?;
    let b_inputs = trained.prepare_all(b_samples, lexicon)?;
    let b_labels: Vec<usize> = b_samples.iter().map(|s| s.class_id).collect();
    let report = build_report(&trained, &pn, &b_inputs, &b_labels, &b.class_names, config.mode)?;
    Ok(ZeroShotOutcome { report, log, trained })
}

fn description_prompts(model: &Model, pos: &[TokenSequence], neg: &[TokenSequence]) -> Result<PNTextEmbeddings> {
    let mut tape = Tape::no_grad();
    let (p, n) = model.description_prompt_embeddings(&mut tape, pos, neg)?;
    Ok(PNTextEmbeddings {
        pos: tape.value(p).clone(),
        neg: tape.value(n).clone(),
    })
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub id: String,
    /// Which setting differs from the base config.
    pub delta: String,
    pub config: TrainConfig,
}

pub const ABLATION_MODALITIES: [&str; 6] = ["v", "vp", "vl", "vpl", "vf", "vplf"];
pub const ABLATION_NEGATIONS: [&str; 2] = ["no", "less"];
pub const ABLATION_SCALES: [f64; 3] = [0.3, 0.5, 0.7];
pub const FIXED_SWEEP: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// The 23-cell grid: one axis varied at a time around `base`.
pub fn ablation_grid(base: &TrainConfig) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    let mut push = |id: String, delta: String, config: TrainConfig| cells.push(AblationCell { id, delta, config });
    for m in ABLATION_MODALITIES {
        let set = ModalitySet::parse(m)?;
        push(format!("modalities-{m}"), format!("modalities={set}"), TrainConfig { modalities: set, ..base.clone() });
    }
    for on in [true, false] {
        let mut c = base.clone();
        c.model.adapters = on;
        push(
            format!("adapters-{}", if on { "on" } else { "off" }),
            format!("adapters={on}"),
            c,
        );
    }
    for w in ABLATION_NEGATIONS {
        push(format!("negation-{w}"), format!("negation_word={w}"), TrainConfig { negation_word: w.into(), ..base.clone() });
    }
    for s in ABLATION_SCALES {
        push(format!("scale-{s}"), format!("s={s}"), TrainConfig { s, ..base.clone() });
    }
    let adaptive = Weighting::default();
    push("weighting-adaptive".into(), "weighting=adaptive".into(), TrainConfig { weighting: adaptive, ..base.clone() });
    for w_v in FIXED_SWEEP {
        let w = Weighting::Fixed { w_v };
        push(format!("weighting-fixed-{w_v}"), format!("weighting={}", w.label()), TrainConfig { weighting: w, ..base.clone() });
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell_id: String,
    pub config_delta: String,
    pub uar: f64,
    pub war: f64,
    pub per_class: Vec<f64>,
}

/// Trains and evaluates every cell. Cells run on a pool of `jobs` threads.
pub fn ablation_suite(
    cells: &[AblationCell],
    manifest: &DatasetManifest,
    train_samples: &[SampleRecord],
    test_samples: &[SampleRecord],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let lexicon = EmotionLexicon::default();
    let run = |cell: &AblationCell| -> Result<AblationRow> {
        let out = train_on(manifest, train_samples, &cell.config, None, &lexicon)?;
        let r = evaluate_samples(&out.trained, test_samples, SimilarityMode::PnDiff, &lexicon)?;
        Ok(AblationRow {
            cell_id: cell.id.clone(),
            config_delta: cell.delta.clone(),
            uar: r.uar,
            war: r.war,
            per_class: r.per_class_accuracy,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

pub fn ablation_csv(rows: &[AblationRow], class_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell_id".to_string(), "config_delta".into(), "uar".into(), "war".into()];
    header.extend(class_names.iter().map(|c| format!("acc_{}", c.replace(' ', "_"))));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.cell_id.clone(), r.config_delta.clone(), format!("{:.4}", r.uar), format!("{:.4}", r.war)];
        rec.extend(r.per_class.iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        field: "csv".into(),
        reason: e.to_string(),
    })?;
    let bad = |field: &str, reason: String| Error::Load {
        path: path.to_path_buf(),
        field: field.into(),
        reason,
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad("row", e.to_string()))?;
        if rec.len() < 4 {
            return Err(bad("row", format!("expected ≥ 4 columns, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad("number", e.to_string()));
        rows.push(AblationRow {
            cell_id: rec[0].to_string(),
            config_delta: rec[1].to_string(),
            uar: num(2)?,
            war: num(3)?,
            per_class: (4..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn svg_frame(title: &str, width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fixed-weight sweep as a line over `w_v`, adaptive weighting as a dashed
/// reference line. `None` if the rows contain no sweep.
pub fn weight_sweep_svg(rows: &[AblationRow]) -> Option<String> {
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.cell_id.strip_prefix("weighting-fixed-")?.parse().ok()?, r.war)))
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let adaptive = rows.iter().find(|r| r.cell_id == "weighting-adaptive").map(|r| r.war);
    let (w, h, l, t, pw, ph) = (480.0, 320.0, 50.0, 30.0, 400.0, 250.0);
    let x = |v: f64| l + pw * v;
    let y = |v: f64| t + ph * (1.0 - v / 100.0);
    let mut s = svg_frame("WAR vs fixed video weight", w, h);
    let _ = writeln!(s, "<line x1=\"{l}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", t + ph, l + pw, t + ph);
    let _ = writeln!(s, "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{}\" stroke=\"black\"/>", t + ph);
    for k in 0..=5 {
        let v = 20.0 * k as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v}</text>", l - 4.0, y(v) + 4.0);
    }
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>", x(v), t + ph + 14.0);
    }
    let path: Vec<String> = pts.iter().map(|(a, b)| format!("{:.2},{:.2}", x(*a), y(*b))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    for (a, b) in &pts {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>", x(*a), y(*b));
    }
    if let Some(a) = adaptive {
        let _ = writeln!(
            s,
            "<line x1=\"{l}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"firebrick\" stroke-dasharray=\"6 4\"/>\n\
             <text x=\"{1}\" y=\"{2:.2}\" text-anchor=\"end\" fill=\"firebrick\">adaptive {a:.1}</text>",
            y(a),
            l + pw,
            y(a) - 4.0
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">w_v</text>", l + pw / 2.0, h - 4.0);
    s.push_str("</svg>\n");
    Some(s)
}

/// Horizontal bars, one per label.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let row = 22.0;
    let (l, t, pw) = (170.0, 30.0, 300.0);
    let h = t + row * labels.len() as f64 + 20.0;
    let mut s = svg_frame(title, l + pw + 60.0, h);
    for (i, (name, v)) in labels.iter().zip(values).enumerate() {
        let yy = t + row * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n\
             <rect x=\"{l}\" y=\"{yy:.1}\" width=\"{:.2}\" height=\"{}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.2}\" y=\"{:.1}\">{v:.1}</text>",
            l - 6.0,
            yy + 14.0,
            xml_escape(name),
            pw * v.clamp(0.0, 100.0) / 100.0,
            row - 6.0,
            l + pw * v.clamp(0.0, 100.0) / 100.0 + 4.0,
            yy + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn report_markdown(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation report\n");
    let _ = writeln!(s, "- samples: {}\n- mode: {:?}\n- UAR: {:.2}\n- WAR: {:.2}", report.num_samples, report.mode, report.uar, report.war);
    let _ = writeln!(
        s,
        "- mean weights (v, p, l, f): {:.3}, {:.3}, {:.3}, {:.3}\n- fingerprint: `{}`\n",
        report.mean_weights[0], report.mean_weights[1], report.mean_weights[2], report.mean_weights[3], report.fingerprint
    );
    let _ = writeln!(s, "| class | accuracy | pos sim | neg sim |\n|---|---|---|---|");
    for (k, name) in report.class_names.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {name} | {:.2} | {:.3} | {:.3} |",
            report.per_class_accuracy[k], report.class_pos_similarity[k], report.class_neg_similarity[k]
        );
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("# Ablation summary\n\n| cell | delta | UAR | WAR |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {:.2} | {:.2} |", r.cell_id, r.config_delta, r.uar, r.war);
    }
    s
}

/// Writes `<stem>.md` and SVG plots for a report or an ablation CSV into
/// `out_dir`. Returns the written paths.
pub fn render(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if input.extension().is_some_and(|e| e == "csv") {
        let rows = read_ablation_csv(input)?;
        files.push((out_dir.join(format!("{stem}.md")), ablation_markdown(&rows)));
        let names: Vec<String> = rows.iter().map(|r| r.cell_id.clone()).collect();
        let wars: Vec<f64> = rows.iter().map(|r| r.war).collect();
        files.push((out_dir.join(format!("{stem}_war.svg")), bar_chart_svg("WAR per cell", &names, &wars)));
        if let Some(svg) = weight_sweep_svg(&rows) {
            files.push((out_dir.join(format!("{stem}_weight_sweep.svg")), svg));
        }
    } else {
        let report = EvalReport::load(input)?;
        report.check()?;
        files.push((out_dir.join(format!("{stem}.md")), report_markdown(&report)));
        files.push((
            out_dir.join(format!("{stem}_per_class.svg")),
            bar_chart_svg("Per-class accuracy", &report.class_names, &report.per_class_accuracy),
        ));
    }
    for (p, text) in &files {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Modalities named by a grid cell, for filtering results.
pub fn cell_modalities(cell: &AblationCell) -> ModalitySet {
    cell.config.modalities
}

/// Whether `m` takes part in `cell`.
pub fn cell_uses(cell: &AblationCell, m: Modality) -> bool {
    cell.config.modalities.contains(m)
}

/// Builds the fusion graph for a batch with the given prompts; exposed for
/// callers that need per-modality scores.
pub fn fusion_for_batch(
    tape: &mut Tape,
    model: &Model,
    batch: &[&SampleInputs],
    pn: &PNTextEmbeddings,
    active: ModalitySet,
    weighting: Weighting,
    mode: SimilarityMode,
) -> Result<FusionGraph> {
    let pos = tape.constant(pn.pos.clone());
    let neg = tape.constant(pn.neg.clone());
    let embs = model.modality_vars(tape, batch, active.0)?;
    FusionGraph::build(tape, embs, pos, neg, active, weighting, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((uar(&cm).unwrap(), war(&cm).unwrap()), (100.0, 100.0));

        let cm = confusion(&[0, 0, 0, 0], &[0, 1, 2, 1], 3).unwrap();
        assert!(cm.counts.iter().all(|r| r[1] == 0 && r[2] == 0));

        let cm = confusion(&[0, 1, 1, 0, 2], &[0, 1, 0, 0, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);

        // Recalls 100 and 0 over rows of 1 and 99 samples.
        let mut preds = vec![0];
        preds.extend(vec![0; 99]);
        let mut labels = vec![0];
        labels.extend(vec![1; 99]);
        let cm = confusion(&preds, &labels, 2).unwrap();
        assert!((uar(&cm).unwrap() - 50.0).abs() < 1e-12);
        assert!((war(&cm).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn published_recall_row() {
        let r = [93.87, 83.25, 75.31, 84.19, 64.33, 0.00, 37.07];
        assert!((uar_from_recalls(&r) - 62.57).abs() < 0.005);
    }

    #[test]
    fn metric_errors() {
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let e = uar(&cm).unwrap_err().to_string();
        assert!(e.contains("[2]"), "{e}");
    }

    #[test]
    fn grid_has_23_cells() {
        let cells = ablation_grid(&TrainConfig::default()).unwrap();
        assert_eq!(cells.len(), 6 + 2 + 2 + 3 + 10);
        let ids: std::collections::HashSet<_> = cells.iter().map(|c| &c.id).collect();
        assert_eq!(ids.len(), 23);
        assert_eq!(ABLATION_SCALES, [0.3, 0.5, 0.7]);
        assert_eq!((FIXED_SWEEP[0], FIXED_SWEEP[8]), (0.1, 0.9));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![AblationRow {
            cell_id: "weighting-fixed-0.3".into(),
            config_delta: "weighting=fixed:0.3".into(),
            uar: 50.0,
            war: 60.0,
            per_class: vec![40.0, 60.0],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, ablation_csv(&rows, &["x y".into(), "z".into()]).unwrap()).unwrap();
        assert_eq!(read_ablation_csv(&p).unwrap(), rows);
        assert!(weight_sweep_svg(&rows).unwrap().starts_with("<svg"));
    }
}
