//! Subcommand bodies. Every command writes `run_config.json` (the resolved
//! configuration and its fingerprint) next to its other outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use pnfer_core::corpus::{generate_corpus, load_all, DatasetManifest, MANIFEST_FILE};
use pnfer_core::eval::{
    ablation_csv, ablation_grid, ablation_suite, evaluate, render, zero_shot, EvalReport,
};
use pnfer_core::fusion::{ModalitySet, SimilarityMode, Weighting};
use pnfer_core::textproc::{refine_description, EmotionLexicon, RefinementReport};
use pnfer_core::training::train as train_model;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{under, RunConfig};
use crate::TrainFlags;

/// An error plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: USAGE, error: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: RUNTIME, error: e.into() })
    }
}

pub struct Context {
    workdir: PathBuf,
    base: RunConfig,
}

impl Context {
    pub fn new(workdir: PathBuf, config: Option<&Path>) -> Result<Self, Failure> {
        let base = match config {
            Some(p) => RunConfig::from_file(&under(&workdir, p)).usage()?,
            None => RunConfig::default(),
        };
        Ok(Context { workdir, base })
    }

    fn path(&self, p: &Path) -> PathBuf {
        under(&self.workdir, p)
    }

    fn existing(&self, p: &Path, what: &str) -> Result<PathBuf, Failure> {
        let full = self.path(p);
        if !full.exists() {
            return Err(anyhow!("{what} not found: {}", full.display())).usage();
        }
        Ok(full)
    }

    fn out_dir(&self, p: &Path) -> Result<PathBuf, Failure> {
        let full = self.path(p);
        fs::create_dir_all(&full)
            .with_context(|| format!("cannot create output directory {}", full.display()))
            .usage()?;
        Ok(full)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

fn write_run_config(dir: &Path, cfg: &RunConfig) -> Result<String, Failure> {
    let fp = cfg.fingerprint();
    let body = json!({ "fingerprint": fp, "config": cfg });
    write(&dir.join("run_config.json"), &(serde_json::to_string_pretty(&body).runtime()? + "\n"))?;
    Ok(fp)
}

/// Report JSON with the run fingerprint added as a top-level key.
fn report_json(report: &EvalReport, fingerprint: &str) -> Result<String, Failure> {
    let mut v = serde_json::to_value(report).runtime()?;
    if let Value::Object(m) = &mut v {
        m.insert("run_fingerprint".into(), Value::String(fingerprint.into()));
    }
    Ok(serde_json::to_string_pretty(&v).runtime()? + "\n")
}

fn parse_mode(s: &str) -> Result<SimilarityMode, Failure> {
    s.parse::<SimilarityMode>().map_err(|e| anyhow!("--mode: {e}")).usage()
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) -> Result<(), Failure> {
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.train;
    if let Some(e) = f.epochs {
        t.epochs = e;
    }
    if let Some(b) = f.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = f.lr {
        t.learning_rate = lr;
    }
    if let Some(m) = &f.modalities {
        t.modalities = ModalitySet::parse(m).usage()?;
    }
    if let Some(w) = &f.weighting {
        t.weighting = Weighting::parse(w).usage()?;
    }
    if let Some(n) = &f.negation {
        t.negation_word = n.clone();
    }
    if let Some(s) = f.s {
        t.s = s;
    }
    Ok(())
}

fn load_manifest(ctx: &Context, p: &Path) -> Result<DatasetManifest, Failure> {
    let full = ctx.existing(p, "corpus")?;
    DatasetManifest::load(&full).runtime()
}

/// Failures here exit 1 whatever their origin.
pub fn gen_data(ctx: &Context, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = ctx.base.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.finish().usage()?;
    let dir = ctx.out_dir(out)?;
    let manifest = generate_corpus(&cfg.generator, cfg.seed, &dir).usage()?;
    let bytes = fs::read(dir.join(MANIFEST_FILE)).usage()?;
    write_run_config(&dir, &cfg).map_err(|f| Failure { code: USAGE, ..f })?;
    let count = |split: &str| manifest.samples.iter().filter(|e| e.split == split).count();
    println!("corpus {} at {}", manifest.corpus_name, dir.display());
    println!("classes {}: {}", manifest.num_classes(), manifest.class_names.join(", "));
    println!("samples {} (train {}, test {})", manifest.samples.len(), count("train"), count("test"));
    println!("manifest sha256 {}", sha256_hex(&bytes));
    Ok(())
}

/// `(id, path)` of every description under `input`, sorted by id.
fn description_files(input: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if input.join(MANIFEST_FILE).is_file() {
        let m = DatasetManifest::load(input).runtime()?;
        let mut docs: Vec<(String, PathBuf)> = m
            .samples
            .iter()
            .map(|e| (e.sample_id.clone(), m.root.join(&e.path).join("description.txt")))
            .collect();
        docs.sort();
        return Ok(docs);
    }
    let mut docs = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display())).usage()? {
        let p = entry.runtime()?.path();
        if p.extension().is_some_and(|e| e == "txt") {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            docs.push((id, p));
        }
    }
    if docs.is_empty() {
        return Err(anyhow!("no manifest or .txt files in {}", input.display())).usage();
    }
    docs.sort();
    Ok(docs)
}

pub fn refine_text(ctx: &Context, input: &Path, lexicon: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = ctx.base.clone().finish().usage()?;
    let input = ctx.existing(input, "input directory")?;
    let lex = match lexicon {
        Some(p) => EmotionLexicon::from_json_file(&ctx.existing(p, "lexicon file")?).runtime()?,
        None => EmotionLexicon::default(),
    };
    let docs = description_files(&input)?;
    let dir = ctx.out_dir(out)?;
    let mut total = RefinementReport::default();
    let (mut changed, mut hits_before, mut hits_after) = (0usize, 0usize, 0usize);
    for (id, path) in &docs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).runtime()?;
        let (refined, r) = refine_description(&text, &lex);
        hits_before += usize::from(lex.has_hit(&text));
        hits_after += usize::from(lex.has_hit(&refined));
        if r.direct_removed + r.cue_clauses_removed > 0 {
            changed += 1;
        }
        total.sentences_in += r.sentences_in;
        total.sentences_out += r.sentences_out;
        total.direct_removed += r.direct_removed;
        total.cue_clauses_removed += r.cue_clauses_removed;
        total.cue_sentences_removed += r.cue_sentences_removed;
        total.fallback |= r.fallback;
        write(&dir.join(format!("{id}.txt")), &refined)?;
    }
    let fp = write_run_config(&dir, &cfg)?;
    let report = json!({
        "run_fingerprint": fp,
        "documents": docs.len(),
        "documents_with_removals": changed,
        "lexicon_hits_before": hits_before,
        "lexicon_hits_after": hits_after,
        "totals": total,
    });
    write(&dir.join("refinement_report.json"), &(serde_json::to_string_pretty(&report).runtime()? + "\n"))?;
    println!("refined {} descriptions into {}", docs.len(), dir.display());
    println!(
        "removals: {changed} documents, {} sentences, {} cue clauses; lexicon hits {hits_before} -> {hits_after}",
        total.direct_removed, total.cue_clauses_removed
    );
    Ok(())
}

pub fn train(ctx: &Context, data: &Path, out: &Path, flags: &TrainFlags) -> Result<(), Failure> {
    let mut cfg = ctx.base.clone();
    apply_train_flags(&mut cfg, flags)?;
    let cfg = cfg.finish().usage()?;
    let manifest = load_manifest(ctx, data)?;
    let dir = ctx.out_dir(out)?;
    let ckpt = dir.join("model.ckpt");
    let outcome = train_model(&manifest, &cfg.train, Some(&ckpt)).runtime()?;
    let log = &outcome.log;
    write(&dir.join("train_log.jsonl"), &log.to_jsonl().runtime()?)?;
    write_run_config(&dir, &cfg)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epoch {}: loss {:.4}, train accuracy {:.2}%",
            last.epoch, last.loss, last.train_accuracy
        );
    }
    println!("trainable parameters {} of {}", log.trainable_params, log.total_params);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn eval(
    ctx: &Context,
    checkpoint: &Path,
    data: &Path,
    split: Option<String>,
    mode: Option<String>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = ctx.base.clone();
    if let Some(s) = split {
        cfg.eval.split = s;
    }
    if let Some(m) = mode {
        cfg.eval.mode = parse_mode(&m)?;
    }
    let cfg = cfg.finish().usage()?;
    let ckpt = ctx.existing(checkpoint, "checkpoint")?;
    let manifest = load_manifest(ctx, data)?;
    let dir = ctx.out_dir(out)?;
    let report = evaluate(&ckpt, &manifest, &cfg.eval.split, cfg.eval.mode).runtime()?;
    let fp = write_run_config(&dir, &cfg)?;
    write(&dir.join("eval_report.json"), &report_json(&report, &fp)?)?;
    println!(
        "{} samples ({}): UAR {:.2}, WAR {:.2}",
        report.num_samples, cfg.eval.split, report.uar, report.war
    );
    Ok(())
}

pub fn zeroshot(
    ctx: &Context,
    pretrain: &Path,
    target: &Path,
    out: &Path,
    epochs: Option<usize>,
    mode: Option<String>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = ctx.base.clone();
    if let Some(e) = epochs {
        cfg.zeroshot.pretrain_epochs = e;
    }
    if let Some(m) = mode {
        cfg.zeroshot.mode = parse_mode(&m)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.finish().usage()?;
    let a = load_manifest(ctx, pretrain)?;
    let b = load_manifest(ctx, target)?;
    let dir = ctx.out_dir(out)?;
    let outcome = zero_shot(&a, &b, &cfg.zeroshot).runtime()?;
    let fp = write_run_config(&dir, &cfg)?;
    write(&dir.join("pretrain_log.jsonl"), &outcome.log.to_jsonl().runtime()?)?;
    write(&dir.join("zeroshot_report.json"), &report_json(&outcome.report, &fp)?)?;
    let chance = 100.0 / b.num_classes() as f64;
    println!(
        "zero-shot on {} ({} samples): UAR {:.2}, WAR {:.2} (chance {:.2})",
        b.corpus_name, outcome.report.num_samples, outcome.report.uar, outcome.report.war, chance
    );
    Ok(())
}

pub fn ablate(
    ctx: &Context,
    data: &Path,
    out: &Path,
    jobs: Option<usize>,
    cells: Option<Vec<String>>,
    flags: &TrainFlags,
) -> Result<(), Failure> {
    let mut cfg = ctx.base.clone();
    apply_train_flags(&mut cfg, flags)?;
    if let Some(j) = jobs {
        cfg.ablate.jobs = j;
    }
    if let Some(c) = cells {
        cfg.ablate.cells = c;
    }
    let cfg = cfg.finish().usage()?;
    let mut grid = ablation_grid(&cfg.train).usage()?;
    if !cfg.ablate.cells.is_empty() {
        if let Some(bad) = cfg.ablate.cells.iter().find(|id| !grid.iter().any(|c| &c.id == *id)) {
            return Err(anyhow!("unknown ablation cell {bad:?}")).usage();
        }
        grid.retain(|c| cfg.ablate.cells.contains(&c.id));
    }
    let manifest = load_manifest(ctx, data)?;
    let dir = ctx.out_dir(out)?;
    let train_samples = load_all(&manifest.subset("train")).runtime()?;
    let test_samples = load_all(&manifest.subset("test")).runtime()?;
    let rows = ablation_suite(&grid, &manifest, &train_samples, &test_samples, cfg.ablate.jobs).runtime()?;
    let fp = write_run_config(&dir, &cfg)?;
    let csv_path = dir.join(format!("ablation_{}.csv", &fp[..12]));
    write(&csv_path, &ablation_csv(&rows, &manifest.class_names).runtime()?)?;
    render(&csv_path, &dir).runtime()?;
    println!("{:<24} {:>7} {:>7}", "cell", "UAR", "WAR");
    for r in &rows {
        println!("{:<24} {:>7.2} {:>7.2}", r.cell_id, r.uar, r.war);
    }
    println!("results {}", csv_path.display());
    Ok(())
}

pub fn report(ctx: &Context, input: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ctx.base.clone().finish().usage()?;
    let input = ctx.existing(input, "input")?;
    let dir = ctx.out_dir(out)?;
    let files = render(&input, &dir).runtime()?;
    write_run_config(&dir, &cfg)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
