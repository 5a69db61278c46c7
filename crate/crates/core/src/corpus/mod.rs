//! Synthetic expression-video corpus: generation, on-disk layout, loading
//! and stratified splitting.
//!
//! ```text
//! <out>/manifest.jsonl
//! <out>/samples/<id>/frames.bin      f32 [T × H × W × C]
//! <out>/samples/<id>/parsing.bin     u8  [T × H × W]
//! <out>/samples/<id>/landmarks.bin   f32 [T × H × W]
//! <out>/samples/<id>/description.txt
//! ```
//!
//! The first manifest line holds the corpus header (name, class names,
//! generator config, seed); every following line is one sample entry.

pub mod array;
mod generate;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use array::{Element, NdArray};
pub use generate::{
    class_pattern, descriptive_class_names, generate_corpus, render_sample, ClassPattern, Motion,
    REGION_NAMES,
};

/// Default class vocabulary: the seven basic expression categories.
pub const DEFAULT_CLASS_NAMES: [&str; 7] = [
    "happiness", "sadness", "neutral", "anger", "surprise", "disgust", "fear",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub corpus_name: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub regions: usize,
    pub noise_std: f64,
    /// Fraction of descriptions that get an emotion phrase injected.
    pub leakage_rate: f64,
    pub paraphrase_count: usize,
    /// Landmark points per class.
    pub landmarks: usize,
    /// Fraction of each class tagged `train`; the rest is `test`.
    pub train_ratio: f64,
    /// Overrides the class names; must have `num_classes` entries.
    pub class_names: Option<Vec<String>>,
    /// Class `k` renders visual pattern `k + pattern_offset`.
    pub pattern_offset: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            corpus_name: "synthetic-dfer".into(),
            num_classes: 7,
            samples_per_class: 40,
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            regions: 5,
            noise_std: 0.1,
            leakage_rate: 0.1,
            paraphrase_count: 4,
            landmarks: 4,
            train_ratio: 0.8,
            class_names: None,
            pattern_offset: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("samples_per_class", self.samples_per_class),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("paraphrase_count", self.paraphrase_count),
            ("landmarks", self.landmarks),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if self.regions < 2 || self.regions > 255 {
            return bad(format!("regions must be in [2, 255], got {}", self.regions));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.leakage_rate) {
            return bad(format!("leakage_rate must be in [0, 1], got {}", self.leakage_rate));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return bad(format!(
                    "class_names has {} entries, num_classes is {}",
                    names.len(),
                    self.num_classes
                ));
            }
        }
        let names = self.resolved_class_names();
        let distinct: HashSet<&String> = names.iter().collect();
        if distinct.len() != names.len() || names.iter().any(|n| n.trim().is_empty()) {
            return bad("class names must be distinct and non-blank".into());
        }
        Ok(())
    }

    pub fn resolved_class_names(&self) -> Vec<String> {
        match &self.class_names {
            Some(n) => n.clone(),
            None => (0..self.num_classes)
                .map(|k| match DEFAULT_CLASS_NAMES.get(k) {
                    Some(n) => n.to_string(),
                    None => format!("expression {k}"),
                })
                .collect(),
        }
    }
}

/// One video sample with all of its derived channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    /// `[T × H × W × C]`, values in `[0, 1]`.
    pub frames: NdArray<f32>,
    /// `[T × H × W]`, region ids in `[0, R)`.
    pub parsing_map: NdArray<u8>,
    /// `[T × H × W]`, unit impulses at landmark points.
    pub landmark_map: NdArray<f32>,
    pub description: String,
    pub class_id: usize,
}

impl SampleRecord {
    pub fn dims(&self) -> [usize; 4] {
        let s = &self.frames.shape;
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Sample directory relative to the corpus root.
    pub path: String,
    pub class_id: usize,
    /// `train`, `test`, or `fold:<k>`.
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    corpus_name: String,
    class_names: Vec<String>,
    generator_config: GeneratorConfig,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub corpus_name: String,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
    pub generator_config: GeneratorConfig,
    pub seed: u64,
    /// Corpus root directory that sample paths are relative to.
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn valid_split(tag: &str) -> bool {
    tag == "train"
        || tag == "test"
        || tag
            .strip_prefix("fold:")
            .is_some_and(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()))
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.samples {
            if !seen.insert(&e.sample_id) {
                return Err(Error::Invalid(format!("duplicate sample_id {}", e.sample_id)));
            }
            if e.class_id >= self.class_names.len() {
                return Err(Error::Invalid(format!(
                    "sample {}: class_id out of range",
                    e.sample_id
                )));
            }
            if !valid_split(&e.split) {
                return Err(Error::Invalid(format!(
                    "sample {}: bad split tag {:?}",
                    e.sample_id, e.split
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            corpus_name: self.corpus_name.clone(),
            class_names: self.class_names.clone(),
            generator_config: self.generator_config.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.samples {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; `path` may be the file or the corpus directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines.next().ok_or_else(|| Error::Load {
            path: file.clone(),
            field: "header".into(),
            reason: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(header_line).map_err(|e| Error::Load {
            path: file.clone(),
            field: "header".into(),
            reason: e.to_string(),
        })?;
        let mut samples = Vec::new();
        for (i, l) in lines.enumerate() {
            samples.push(serde_json::from_str(l).map_err(|e| Error::Load {
                path: file.clone(),
                field: format!("line {}", i + 2),
                reason: e.to_string(),
            })?);
        }
        let manifest = DatasetManifest {
            corpus_name: header.corpus_name,
            class_names: header.class_names,
            samples,
            generator_config: header.generator_config,
            seed: header.seed,
            root: file.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(manifest)
    }

    /// Entries carrying the given split tag.
    pub fn subset(&self, split: &str) -> DatasetManifest {
        let mut m = self.clone();
        m.samples.retain(|e| e.split == split);
        m
    }

    pub fn entry(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|e| e.sample_id == sample_id)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for e in &self.samples {
            if e.class_id < c.len() {
                c[e.class_id] += 1;
            }
        }
        c
    }
}

/// Reads one sample and checks every [`SampleRecord`] invariant.
pub fn load_sample(manifest: &DatasetManifest, sample_id: &str) -> Result<SampleRecord> {
    let entry = manifest.entry(sample_id).ok_or_else(|| Error::Load {
        path: manifest.root.join(MANIFEST_FILE),
        field: "sample_id".into(),
        reason: format!("unknown sample {sample_id}"),
    })?;
    let dir = manifest.root.join(&entry.path);
    let load_err = |field: &str, reason: String| Error::Load {
        path: dir.clone(),
        field: field.into(),
        reason,
    };
    if entry.class_id >= manifest.num_classes() {
        return Err(load_err("class_id", "class_id out of range".into()));
    }
    let frames = NdArray::<f32>::read(&dir.join("frames.bin"), "frames")?;
    let parsing_map = NdArray::<u8>::read(&dir.join("parsing.bin"), "parsing_map")?;
    let landmark_map = NdArray::<f32>::read(&dir.join("landmarks.bin"), "landmark_map")?;
    let desc_path = dir.join("description.txt");
    let description = fs::read_to_string(&desc_path)
        .map_err(|e| load_err("description", e.to_string()))?;

    if frames.shape.len() != 4 {
        return Err(load_err("frames", format!("rank {} (want 4)", frames.shape.len())));
    }
    let thw = &frames.shape[..3];
    if parsing_map.shape != thw {
        return Err(load_err(
            "parsing_map",
            format!("shape {:?} does not match frames {thw:?}", parsing_map.shape),
        ));
    }
    if landmark_map.shape != thw {
        return Err(load_err(
            "landmark_map",
            format!("shape {:?} does not match frames {thw:?}", landmark_map.shape),
        ));
    }
    let g = &manifest.generator_config;
    let want = [g.frames, g.height, g.width, g.channels];
    if frames.shape != want {
        return Err(load_err(
            "frames",
            format!("shape {:?} differs from generator config {want:?}", frames.shape),
        ));
    }
    if frames.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(load_err("frames", "value outside [0, 1]".into()));
    }
    if let Some(bad) = parsing_map.data.iter().find(|v| **v as usize >= g.regions) {
        return Err(load_err(
            "parsing_map",
            format!("region id {bad} ≥ R = {}", g.regions),
        ));
    }
    if landmark_map.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(load_err("landmark_map", "value outside [0, 1]".into()));
    }
    if description.trim().is_empty() {
        return Err(load_err("description", "empty description".into()));
    }
    Ok(SampleRecord {
        sample_id: entry.sample_id.clone(),
        frames,
        parsing_map,
        landmark_map,
        description,
        class_id: entry.class_id,
    })
}

/// Loads every sample of `manifest` in manifest order.
pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<SampleRecord>> {
    manifest
        .samples
        .iter()
        .map(|e| load_sample(manifest, &e.sample_id))
        .collect()
}

/// Class-stratified split: each class contributes `round(ratio · n_k)`
/// samples (clamped to `[1, n_k − 1]`) to the train side.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.samples.iter().enumerate() {
        by_class.entry(e.class_id).or_default().push(i);
    }
    let mut train_idx = HashSet::new();
    for (class, idx) in &by_class {
        if idx.len() < 2 {
            return Err(Error::Invalid(format!(
                "class {class} has {} sample(s); stratified split needs ≥ 2",
                idx.len()
            )));
        }
        let mut shuffled = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(*class as u64);
        shuffled.shuffle(&mut rng);
        let n_train = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train_idx.extend(shuffled[..n_train].iter().copied());
    }
    let mut train = manifest.clone();
    let mut test = manifest.clone();
    train.samples.clear();
    test.samples.clear();
    for (i, e) in manifest.samples.iter().enumerate() {
        let mut e = e.clone();
        if train_idx.contains(&i) {
            e.split = "train".into();
            train.samples.push(e);
        } else {
            e.split = "test".into();
            test.samples.push(e);
        }
    }
    Ok((train, test))
}
