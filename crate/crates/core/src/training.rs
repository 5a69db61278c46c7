//! Weighted multi-modal cross-entropy, momentum SGD over the trainable
//! partition, the supervised loop and checkpoints.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{load_all, DatasetManifest, SampleRecord};
use crate::encoders::{Model, ModalityEmbeddings, ModelConfig, PNTextEmbeddings, SampleInputs};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, pn_similarity, FusionGraph, FusionWeights, Modality, ModalitySet, SimilarityMode,
    Weighting,
};
use crate::netcore::{checkpoint, Gradients, Mat, ParamId, ParamStore, Tape, Var};
use crate::textproc::{
    build_vocab, expand_pn_templates, refine_description, tokenize, EmotionLexicon, TokenSequence,
    Vocabulary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub tau: f64,
    /// Scale of the parallel adapter branch in visual blocks.
    pub s: f64,
    pub negation_word: String,
    pub weighting: Weighting,
    pub modalities: ModalitySet,
    /// Strip emotion leakage from descriptions before tokenizing.
    pub refine_descriptions: bool,
    pub seed: u64,
    /// Architecture; data-dependent fields (vocabulary size, frame shape,
    /// region count, `s`, init seed) are filled in by [`train`].
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-4,
            momentum: 0.9,
            tau: 0.01,
            s: 0.5,
            negation_word: crate::textproc::DEFAULT_NEGATION.to_string(),
            weighting: Weighting::default(),
            modalities: ModalitySet::FULL,
            refine_descriptions: true,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !self.s.is_finite() {
            return bad("s must be finite".into());
        }
        if self.negation_word.trim().is_empty() {
            return bad("negation_word must be non-blank".into());
        }
        self.weighting.validate()
    }

    /// The model config for a corpus described by `manifest`.
    pub fn resolve_model(&self, manifest: &DatasetManifest, vocab_size: usize) -> ModelConfig {
        let g = &manifest.generator_config;
        ModelConfig {
            vocab_size,
            frames: g.frames,
            height: g.height,
            image_width: g.width,
            channels: g.channels,
            regions: g.regions,
            parallel_scale: self.s,
            init_seed: self.seed,
            ..self.model.clone()
        }
    }
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= n) {
        Some(y) => Err(Error::Invalid(format!("label {y} out of range for {n} classes"))),
        None => Ok(()),
    }
}

fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// `(1/B) Σ_b [CE(fused) + Σ_m w_m CE(m)]`, evaluated directly from the
/// embeddings. `weights` holds one entry per sample.
pub fn multi_modal_loss(
    embs: &ModalityEmbeddings,
    pn: &PNTextEmbeddings,
    labels: &[usize],
    weights: &[FusionWeights],
    tau: f64,
) -> Result<f64> {
    let b = labels.len();
    if b == 0 || weights.len() != b || embs.v.rows != b {
        return Err(Error::shape("loss batch", b, weights.len().max(embs.v.rows)));
    }
    check_labels(labels, pn.num_classes())?;
    let mut total = 0.0;
    for (i, (&y, w)) in labels.iter().zip(weights).enumerate() {
        let rows = [embs.v.row(i), embs.p.row(i), embs.l.row(i), embs.f.row(i)];
        let fused = fuse(rows, w)?;
        let (probs, _) = crate::fusion::classify(&fused, pn, tau)?;
        total += cross_entropy(&probs, y);
        for m in w.active.active() {
            let (probs, _) = crate::fusion::classify(rows[m.index()], pn, tau)?;
            total += w.get(m) * cross_entropy(&probs, y);
        }
    }
    Ok(total / b as f64)
}

/// Tape nodes of the loss and its parts.
pub struct LossGraph {
    pub total: Var,
    /// Per-sample fused cross-entropy `[B × 1]`.
    pub fused_ce: Var,
    /// Per-sample unweighted modality cross-entropies.
    pub modality_ce: [Option<Var>; 4],
}

/// Builds the weighted multi-modal loss on top of a [`FusionGraph`].
pub fn tape_loss(tape: &mut Tape, graph: &FusionGraph, labels: &[usize], tau: f64) -> Result<LossGraph> {
    let n = tape.value(graph.fused_scores).cols;
    let b = labels.len();
    check_labels(labels, n)?;
    let logits = tape.scale(graph.fused_scores, 1.0 / tau);
    let fused_ce = tape.cross_entropy_rows(logits, labels.to_vec());
    let mut total = tape.sum_all(fused_ce);
    let mut modality_ce = [None; 4];
    for m in Modality::ALL {
        if let (Some(scores), Some(w)) = (graph.scores[m.index()], graph.weight_vars[m.index()]) {
            let logits = tape.scale(scores, 1.0 / tau);
            let ce = tape.cross_entropy_rows(logits, labels.to_vec());
            let weighted = tape.mul_rows_by(ce, w);
            let s = tape.sum_all(weighted);
            total = tape.add(total, s);
            modality_ce[m.index()] = Some(ce);
        }
    }
    let total = tape.scale(total, 1.0 / b as f64);
    Ok(LossGraph {
        total,
        fused_ce,
        modality_ce,
    })
}

/// Momentum SGD state: `v ← μ v + g`, `p ← p − lr · v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads`. Frozen tensors are
    /// rejected, not skipped, since a gradient for them means a broken
    /// partition.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Mat>) -> Result<()> {
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for id in &ids {
            let t = store.get(**id);
            let g = &grads[*id];
            if !t.trainable {
                return Err(Error::Invalid(format!("gradient for frozen parameter {}", t.name)));
            }
            if g.data.len() != t.values.len() {
                return Err(Error::shape(format!("gradient of {}", t.name), t.values.len(), g.data.len()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", t.name)));
            }
        }
        for id in ids {
            let g = &grads[id];
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| vec![0.0; g.data.len()]);
            let p = &mut store.get_mut(*id).values;
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(&g.data) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// One plain update without persistent state: the first step of [`Sgd`].
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    Sgd::new(lr, momentum).step(store, grads.params())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub fused_loss: f64,
    /// Mean unweighted cross-entropy per modality (`null` if inactive).
    pub modality_loss: [Option<f64>; 4],
    pub mean_weights: [f64; 4],
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Trainable tensors of active towers that never got a nonzero gradient
    /// during the first epoch.
    pub dead_after_first_epoch: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&json!({
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "dead_after_first_epoch": self.dead_after_first_epoch,
            "checkpoint": self.checkpoint,
        }))?);
        out.push('\n');
        Ok(out)
    }
}

/// A model together with everything needed to feed it text.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
    pub negation_word: String,
    pub refine_descriptions: bool,
    pub modalities: ModalitySet,
    pub weighting: Weighting,
    pub tau: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    vocab: Vocabulary,
    class_names: Vec<String>,
    negation_word: String,
    refine_descriptions: bool,
    modalities: ModalitySet,
    weighting: Weighting,
    tau: f64,
}

const CHECKPOINT_FORMAT: &str = "pnfer-checkpoint-1";

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            class_names: self.class_names.clone(),
            negation_word: self.negation_word.clone(),
            refine_descriptions: self.refine_descriptions,
            modalities: self.modalities,
            weighting: self.weighting,
            tau: self.tau,
        };
        checkpoint::save(path, &serde_json::to_value(header)?, &self.model.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        let mut h: serde_json::Map<String, serde_json::Value> = match header {
            serde_json::Value::Object(m) => m,
            _ => return Err(Error::Load {
                path: path.to_path_buf(),
                field: "header".into(),
                reason: "not a JSON object".into(),
            }),
        };
        h.remove("trainable");
        let h: CheckpointHeader = serde_json::from_value(serde_json::Value::Object(h)).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            field: "header".into(),
            reason: e.to_string(),
        })?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Load {
                path: path.to_path_buf(),
                field: "format".into(),
                reason: format!("unsupported format {:?}", h.format),
            });
        }
        if h.vocab.len() != h.model.vocab_size {
            return Err(Error::ArchitectureMismatch(format!(
                "vocabulary has {} tokens, model expects {}",
                h.vocab.len(),
                h.model.vocab_size
            )));
        }
        Ok(TrainedModel {
            model: Model::from_store(h.model, store)?,
            vocab: h.vocab,
            class_names: h.class_names,
            negation_word: h.negation_word,
            refine_descriptions: h.refine_descriptions,
            modalities: h.modalities,
            weighting: h.weighting,
            tau: h.tau,
        })
    }

    pub fn label_tokens(&self, class_names: &[String]) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
        prompt_tokens(class_names, &self.negation_word, &self.vocab, self.model.config.label_max_len)
    }

    pub fn description_tokens(&self, text: &str, lexicon: &EmotionLexicon) -> Result<TokenSequence> {
        description_tokens(text, self.refine_descriptions, lexicon, &self.vocab, &self.model.config)
    }

    /// Frozen input stage of every sample, in parallel.
    pub fn prepare_all(&self, samples: &[SampleRecord], lexicon: &EmotionLexicon) -> Result<Vec<SampleInputs>> {
        samples
            .par_iter()
            .map(|s| {
                let t = self.description_tokens(&s.description, lexicon)?;
                self.model.prepare(s, t)
            })
            .collect()
    }

    /// Label-tower PN embeddings of `class_names`.
    pub fn class_embeddings(&self, class_names: &[String]) -> Result<PNTextEmbeddings> {
        let (p, n) = self.label_tokens(class_names)?;
        self.model.encode_labels(&p, &n)
    }

    /// Untrained model for `config` with a vocabulary over the class
    /// prompts and the descriptions of `samples`.
    pub fn initialize(
        manifest: &DatasetManifest,
        samples: &[SampleRecord],
        config: &TrainConfig,
        lexicon: &EmotionLexicon,
    ) -> Result<Self> {
        config.validate()?;
        let descriptions: Vec<&str> = samples.iter().map(|s| s.description.as_str()).collect();
        let vocab = training_vocab(
            &manifest.class_names,
            &config.negation_word,
            &descriptions,
            config.refine_descriptions,
            lexicon,
        )?;
        Ok(TrainedModel {
            model: Model::new(config.resolve_model(manifest, vocab.len()))?,
            vocab,
            class_names: manifest.class_names.clone(),
            negation_word: config.negation_word.clone(),
            refine_descriptions: config.refine_descriptions,
            modalities: config.modalities,
            weighting: config.weighting,
            tau: config.tau,
        })
    }

    /// Hash of every frozen tensor.
    pub fn frozen_hash(&self) -> String {
        self.model.store.frozen_hash()
    }
}

pub fn prompt_tokens(
    class_names: &[String],
    negation: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    let (pos, neg) = expand_pn_templates(class_names, negation)?;
    let p = pos.iter().map(|t| tokenize(t, vocab, max_len)).collect::<Result<Vec<_>>>()?;
    let n = neg.iter().map(|t| tokenize(t, vocab, max_len)).collect::<Result<Vec<_>>>()?;
    Ok((p, n))
}

fn description_tokens(
    text: &str,
    refine: bool,
    lexicon: &EmotionLexicon,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    let text = if refine {
        refine_description(text, lexicon).0
    } else {
        text.to_string()
    };
    tokenize(&text, vocab, cfg.description_max_len)
}

/// Vocabulary over the PN prompts and the (refined) training descriptions.
pub fn training_vocab(
    class_names: &[String],
    negation: &str,
    descriptions: &[&str],
    refine: bool,
    lexicon: &EmotionLexicon,
) -> Result<Vocabulary> {
    let (pos, neg) = expand_pn_templates(class_names, negation)?;
    let refined: Vec<String> = descriptions
        .iter()
        .map(|d| if refine { refine_description(d, lexicon).0 } else { d.to_string() })
        .collect();
    let texts = pos
        .iter()
        .chain(&neg)
        .chain(&refined)
        .map(String::as_str)
        .chain([crate::textproc::FALLBACK_DESCRIPTION]);
    Ok(build_vocab(texts))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub log: TrainLog,
}

/// Shuffled minibatches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Supervised training on the `train` split of `manifest`. When
/// `checkpoint_path` is given the final model is written there.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    let samples = load_all(&manifest.subset("train"))?;
    train_on(manifest, &samples, config, checkpoint_path, &EmotionLexicon::default())
}

/// [`train`] over already loaded samples.
pub fn train_on(
    manifest: &DatasetManifest,
    samples: &[SampleRecord],
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    lexicon: &EmotionLexicon,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut trained = TrainedModel::initialize(manifest, samples, config, lexicon)?;
    let inputs = trained.prepare_all(samples, lexicon)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    check_labels(&labels, trained.class_names.len())?;
    let (pos_tokens, neg_tokens) = trained.label_tokens(&trained.class_names.clone())?;

    let mut log = TrainLog {
        trainable_params: trained.model.store.trainable_count(),
        total_params: trained.model.store.total_count(),
        ..TrainLog::default()
    };
    let mut sgd = Sgd::new(config.learning_rate, config.momentum);
    let mut touched: HashSet<ParamId> = HashSet::new();
    let active = config.modalities;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut fused_sum = 0.0;
        let mut mod_sum = [0.0; 4];
        let mut w_sum = [0.0; 4];
        let mut correct = 0usize;
        for batch in epoch_batches(inputs.len(), config.batch_size, config.seed, epoch) {
            let refs: Vec<&SampleInputs> = batch.iter().map(|&i| &inputs[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let m = &trained.model;
            let (pos, neg) = m.label_embeddings(&mut tape, &pos_tokens, &neg_tokens)?;
            let embs = m.modality_vars(&mut tape, &refs, active.0)?;
            let graph = FusionGraph::build(&mut tape, embs, pos, neg, active, config.weighting, SimilarityMode::PnDiff)?;
            let loss = tape_loss(&mut tape, &graph, &y, config.tau)?;
            let lv = tape.value(loss.total).data[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            let bsz = y.len() as f64;
            loss_sum += lv * bsz;
            fused_sum += tape.value(loss.fused_ce).data.iter().sum::<f64>();
            for mdl in active.active() {
                let ce = loss.modality_ce[mdl.index()].expect("active");
                mod_sum[mdl.index()] += tape.value(ce).data.iter().sum::<f64>();
            }
            for w in &graph.weights {
                for (a, v) in w_sum.iter_mut().zip(w.w) {
                    *a += v;
                }
            }
            let fs = tape.value(graph.fused_scores);
            for (r, &yy) in y.iter().enumerate() {
                if crate::netcore::tape::argmax_first(fs.row(r)).0 == yy {
                    correct += 1;
                }
            }
            let grads = tape.backward(loss.total);
            if epoch == 1 {
                for (id, g) in grads.params() {
                    if g.data.iter().any(|v| *v != 0.0) {
                        touched.insert(*id);
                    }
                }
            }
            sgd.step(&mut trained.model.store, grads.params())?;
        }
        let n = inputs.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            fused_loss: fused_sum / n,
            modality_loss: std::array::from_fn(|i| active.0[i].then(|| mod_sum[i] / n)),
            mean_weights: w_sum.map(|v| v / n),
            train_accuracy: 100.0 * correct as f64 / n,
        });
        if epoch == 1 {
            log.dead_after_first_epoch = dead_params(&trained.model, &touched, active);
        }
    }

    if let Some(p) = checkpoint_path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        trained.save(p)?;
        log.checkpoint = Some(p.to_path_buf());
    }
    Ok(TrainOutcome { trained, log })
}

/// Trainable tensors of towers taking part in training that were never
/// touched by a nonzero gradient.
fn dead_params(model: &Model, touched: &HashSet<ParamId>, active: ModalitySet) -> Vec<String> {
    let mut prefixes = vec!["label."];
    if active.contains(Modality::Video) {
        prefixes.push("video.");
    }
    if active.contains(Modality::Parsing) {
        prefixes.push("face.parsing_head");
    }
    if active.contains(Modality::Landmark) {
        prefixes.push("face.landmark_head");
    }
    if active.contains(Modality::Parsing) || active.contains(Modality::Landmark) {
        prefixes.push("face.temporal");
        prefixes.push("face.spatial");
        prefixes.push("face.parallel");
    }
    if active.contains(Modality::Description) {
        prefixes.push("description.");
    }
    let mut out: Vec<String> = model
        .store
        .iter()
        .filter(|(id, t)| t.trainable && !touched.contains(id) && prefixes.iter().any(|p| t.name.starts_with(p)))
        .filter(|(_, t)| model.config.parallel_scale != 0.0 || !t.name.contains("parallel_adapter"))
        .map(|(_, t)| t.name.clone())
        .collect();
    out.sort();
    out
}

/// Predictions and per-modality details for a set of prepared inputs.
pub struct Predictions {
    pub predicted: Vec<usize>,
    pub weights: Vec<FusionWeights>,
    /// Per-sample fused similarities (pos, neg) for the class-wise analysis.
    pub fused_pos: Vec<Vec<f64>>,
    pub fused_neg: Vec<Vec<f64>>,
}

/// Forward pass without gradients over `inputs` in chunks.
pub fn predict(
    trained: &TrainedModel,
    pn: &PNTextEmbeddings,
    inputs: &[SampleInputs],
    mode: SimilarityMode,
) -> Result<Predictions> {
    let chunks: Vec<&[SampleInputs]> = inputs.chunks(32).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| predict_chunk(trained, pn, chunk, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Predictions {
        predicted: vec![],
        weights: vec![],
        fused_pos: vec![],
        fused_neg: vec![],
    };
    for p in parts {
        out.predicted.extend(p.predicted);
        out.weights.extend(p.weights);
        out.fused_pos.extend(p.fused_pos);
        out.fused_neg.extend(p.fused_neg);
    }
    Ok(out)
}

fn predict_chunk(
    trained: &TrainedModel,
    pn: &PNTextEmbeddings,
    chunk: &[SampleInputs],
    mode: SimilarityMode,
) -> Result<Predictions> {
    let model = &trained.model;
    let mut tape = Tape::no_grad();
    let refs: Vec<&SampleInputs> = chunk.iter().collect();
    let pos = tape.constant(pn.pos.clone());
    let neg = tape.constant(pn.neg.clone());
    let embs = model.modality_vars(&mut tape, &refs, trained.modalities.0)?;
    let graph = FusionGraph::build(&mut tape, embs, pos, neg, trained.modalities, trained.weighting, mode)?;
    let fs = tape.value(graph.fused_scores);
    let predicted = (0..fs.rows).map(|r| crate::netcore::tape::argmax_first(fs.row(r)).0).collect();
    let fused = tape.value(graph.fused);
    let mut fused_pos = Vec::with_capacity(chunk.len());
    let mut fused_neg = Vec::with_capacity(chunk.len());
    for r in 0..fused.rows {
        let s = pn_similarity(fused.row(r), pn)?;
        fused_pos.push(s.pos);
        fused_neg.push(s.neg);
    }
    Ok(Predictions {
        predicted,
        weights: graph.weights,
        fused_pos,
        fused_neg,
    })
}

/// Loss-free summary of a config for artifact headers.
pub fn config_summary(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("modalities".into(), config.modalities.to_string());
    m.insert("weighting".into(), config.weighting.label());
    m.insert("negation".into(), config.negation_word.clone());
    m.insert("s".into(), config.s.to_string());
    m.insert("adapters".into(), config.model.adapters.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut store = ParamStore::new();
        let w = store.insert("w", vec![1], vec![1.0], true).unwrap();
        let f = store.insert("f", vec![1], vec![5.0], false).unwrap();
        let g: HashMap<ParamId, Mat> = [(w, Mat::scalar(2.0))].into();
        Sgd::new(0.1, 0.0).step(&mut store, &g).unwrap();
        assert!((store.get(w).values[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.get(f).values[0], 5.0);

        let before = store.get(w).values[0];
        Sgd::new(0.0, 0.9).step(&mut store, &g).unwrap();
        assert_eq!(store.get(w).values[0], before);

        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut store, &g).unwrap();
        let a = store.get(w).values[0];
        opt.step(&mut store, &g).unwrap();
        let b = store.get(w).values[0];
        assert!(((a - b) - 0.1 * 2.0 * 1.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_bad_gradients() {
        let mut store = ParamStore::new();
        let w = store.insert("enc.w", vec![1], vec![1.0], true).unwrap();
        let f = store.insert("enc.f", vec![1], vec![1.0], false).unwrap();
        let g: HashMap<ParamId, Mat> = [(w, Mat::scalar(f64::NAN))].into();
        match Sgd::new(0.1, 0.0).step(&mut store, &g) {
            Err(Error::NonFinite(m)) => assert!(m.contains("enc.w")),
            other => panic!("{other:?}"),
        }
        let g: HashMap<ParamId, Mat> = [(f, Mat::scalar(1.0))].into();
        assert!(Sgd::new(0.1, 0.0).step(&mut store, &g).is_err());
    }

    #[test]
    fn config_invariants() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..TrainConfig::default() }.validate().is_err());
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.learning_rate, c.tau, c.s), (30, 3e-4, 0.01, 0.5));
    }

    fn uniform_case() -> (ModalityEmbeddings, PNTextEmbeddings) {
        let row = vec![1.0, 0.5, -0.25];
        let embs = ModalityEmbeddings {
            v: Mat::from_rows(&[row.clone(), row.clone()]),
            p: Mat::from_rows(&[row.clone(), row.clone()]),
            l: Mat::from_rows(&[row.clone(), row.clone()]),
            f: Mat::from_rows(&[row.clone(), row]),
        };
        let pn = PNTextEmbeddings {
            pos: Mat::from_rows(&vec![vec![0.0, 1.0, 0.0]; 7]),
            neg: Mat::from_rows(&vec![vec![0.0, 0.0, 1.0]; 7]),
        };
        (embs, pn)
    }

    #[test]
    fn uniform_probabilities_give_two_ln7() {
        let (embs, pn) = uniform_case();
        let w = vec![FusionWeights::new([0.25; 4]).unwrap(); 2];
        let l = multi_modal_loss(&embs, &pn, &[3, 5], &w, 0.01).unwrap();
        assert!((l - 2.0 * 7f64.ln()).abs() < 1e-12);
        assert!((l - 3.8918).abs() < 5e-5);
        assert!(multi_modal_loss(&embs, &pn, &[3, 7], &w, 0.01).is_err());
    }

    #[test]
    fn confident_correct_predictions_have_near_zero_loss() {
        let e = |i: usize| -> Vec<f64> { (0..3).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
        let embs = ModalityEmbeddings {
            v: Mat::from_rows(&[e(0), e(1)]),
            p: Mat::from_rows(&[e(0), e(1)]),
            l: Mat::from_rows(&[e(0), e(1)]),
            f: Mat::from_rows(&[e(0), e(1)]),
        };
        let pn = PNTextEmbeddings {
            pos: Mat::from_rows(&[e(0), e(1), e(2)]),
            neg: Mat::from_rows(&[e(1), e(2), e(0)]),
        };
        let w = vec![FusionWeights::new([0.25; 4]).unwrap(); 2];
        let l = multi_modal_loss(&embs, &pn, &[0, 1], &w, 0.01).unwrap();
        assert!(l >= 0.0 && l < 1e-80, "{l}");
    }
}
