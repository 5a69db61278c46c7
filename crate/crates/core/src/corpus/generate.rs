//! Class-keyed prototype rendering and description templates.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::textproc::lexicon::EMOTION_WORDS;

use super::{
    split_dataset, DatasetManifest, GeneratorConfig, ManifestEntry, NdArray, SampleRecord,
    MANIFEST_FILE,
};

/// Names of face regions `1..R`; region 0 is background. Indices past the
/// end get a numbered name.
pub const REGION_NAMES: [&str; 8] = [
    "brows",
    "eyelids",
    "nostrils",
    "mouth corners",
    "cheeks",
    "jaw muscles",
    "forehead lines",
    "lip edges",
];

/// Direction of the per-class monotone deformation of the focus region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Raise,
    Lower,
    Widen,
    Narrow,
}

impl Motion {
    fn from_index(i: usize) -> Motion {
        [Motion::Raise, Motion::Lower, Motion::Widen, Motion::Narrow][i % 4]
    }

    /// Verb phrases (plural subject) used in descriptions.
    fn verbs(self) -> [&'static str; 4] {
        match self {
            Motion::Raise => ["rise", "lift", "move upward", "go up"],
            Motion::Lower => ["drop", "sink", "move downward", "go down"],
            Motion::Widen => ["widen", "stretch", "spread apart", "broaden"],
            Motion::Narrow => ["narrow", "tighten", "pull together", "contract"],
        }
    }
}

/// Visual signature of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    /// Focus region id in `1..R`.
    pub region: usize,
    pub motion: Motion,
    /// Channel receiving the colour ramp.
    pub tint_channel: usize,
    /// Colour change at the last frame (signed).
    pub tint: f64,
    /// Whether descriptions mention the colour ramp.
    pub describe_tint: bool,
}

pub fn region_name(region: usize) -> String {
    REGION_NAMES
        .get(region.wrapping_sub(1))
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("region {region} area"))
}

fn region_level(region: usize, regions: usize) -> f64 {
    0.1 + 0.8 * region as f64 / regions as f64
}

/// Deterministic pattern of class `k` (before `pattern_offset`).
pub fn class_pattern(config: &GeneratorConfig, class: usize) -> ClassPattern {
    let k = class + config.pattern_offset;
    let face_regions = config.regions - 1;
    let region = 1 + k % face_regions;
    let wave = k / face_regions;
    let motion = Motion::from_index(wave);
    let tint_channel = (wave / 4) % config.channels;
    let level = region_level(region, config.regions);
    let magnitude = 0.12 + 0.04 * ((wave / (4 * config.channels)) % 3) as f64;
    let tint = if level > 0.5 { -magnitude } else { magnitude };
    ClassPattern {
        region,
        motion,
        tint_channel,
        tint,
        describe_tint: wave >= 4,
    }
}

/// Class names built from each class's region and motion words, e.g.
/// `"mouth corners rise"`. Useful for a corpus whose labels must be
/// describable in the caption vocabulary of another corpus.
pub fn descriptive_class_names(config: &GeneratorConfig) -> Vec<String> {
    (0..config.num_classes)
        .map(|k| {
            let p = class_pattern(config, k);
            format!("{} {}", region_name(p.region), p.motion.verbs()[0])
        })
        .collect()
}

/// Temporal ramp in `[0, 1]`, monotone in `t`.
fn ramp(t: usize, frames: usize) -> f64 {
    if frames <= 1 {
        1.0
    } else {
        t as f64 / (frames - 1) as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Box2 {
    cy: f64,
    cx: f64,
    hh: f64,
    hw: f64,
}

impl Box2 {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        (py - self.cy).abs() <= self.hh && (px - self.cx).abs() <= self.hw
    }
}

fn region_box(config: &GeneratorConfig, region: usize) -> Box2 {
    let h = config.height as f64;
    let w = config.width as f64;
    let band = 0.8 * h / (config.regions - 1) as f64;
    Box2 {
        cy: 0.1 * h + (region as f64 - 0.5) * band,
        cx: 0.5 * w,
        hh: 0.3 * band,
        hw: 0.25 * w,
    }
}

fn focus_box(config: &GeneratorConfig, pattern: &ClassPattern, alpha: f64) -> Box2 {
    let mut b = region_box(config, pattern.region);
    let band = 0.8 * config.height as f64 / (config.regions - 1) as f64;
    match pattern.motion {
        Motion::Raise => b.cy -= alpha * 0.35 * band,
        Motion::Lower => b.cy += alpha * 0.35 * band,
        Motion::Widen => b.hw *= 1.0 + 0.6 * alpha,
        Motion::Narrow => b.hw *= 1.0 - 0.5 * alpha,
    }
    b
}

/// Region label of each pixel of frame `t` of the noiseless prototype.
fn parsing_frame(config: &GeneratorConfig, pattern: &ClassPattern, t: usize) -> Vec<u8> {
    let (h, w) = (config.height, config.width);
    let mut out = vec![0u8; h * w];
    let alpha = ramp(t, config.frames);
    for r in 1..config.regions {
        if r == pattern.region {
            continue;
        }
        let b = region_box(config, r);
        for y in 0..h {
            for x in 0..w {
                if b.contains(y, x) {
                    out[y * w + x] = r as u8;
                }
            }
        }
    }
    let b = focus_box(config, pattern, alpha);
    for y in 0..h {
        for x in 0..w {
            if b.contains(y, x) {
                out[y * w + x] = pattern.region as u8;
            }
        }
    }
    out
}

/// Landmark pixels: evenly spaced over the pixels that belong to the focus
/// region in every frame.
fn landmark_points(config: &GeneratorConfig, pattern: &ClassPattern) -> Result<Vec<(usize, usize)>> {
    let (h, w) = (config.height, config.width);
    let mut common: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .collect();
    for t in 0..config.frames {
        let b = focus_box(config, pattern, ramp(t, config.frames));
        common.retain(|&(y, x)| b.contains(y, x));
    }
    if common.is_empty() {
        return Err(Error::Config(format!(
            "spatial size {h}×{w} is too small for {} regions: the focus region of {} \
             has no pixel common to all frames",
            config.regions,
            region_name(pattern.region)
        )));
    }
    let k = config.landmarks;
    let mut pts: Vec<(usize, usize)> = (0..k)
        .map(|j| common[((2 * j + 1) * common.len()) / (2 * k)])
        .collect();
    pts.dedup();
    Ok(pts)
}

const TEMPLATES: [&str; 4] = [
    "The {r} {v} {a} across frames.",
    "Across frames, the {r} {v} {a}.",
    "Over the clip the {r} {v} {a}.",
    "From the first frame to the last, the {r} {v} {a}.",
];
const ADVERBS: [&str; 4] = ["gradually", "steadily", "slowly", "progressively"];
const FILLERS: [&str; 3] = [
    "The head stays mostly still.",
    "The person faces the camera.",
    "The lighting remains constant.",
];
const COLOURS: [&str; 3] = ["red", "green", "blue"];

fn paraphrase(pattern: &ClassPattern, variant: usize) -> String {
    let tpl = TEMPLATES[variant % TEMPLATES.len()];
    let verb = pattern.motion.verbs()[(variant / TEMPLATES.len()) % 4];
    let adv = ADVERBS[(variant / 16 + variant) % ADVERBS.len()];
    let mut s = tpl
        .replace("{r}", &region_name(pattern.region))
        .replace("{v}", verb)
        .replace("{a}", adv);
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    if pattern.describe_tint {
        let colour = COLOURS
            .get(pattern.tint_channel)
            .map(|c| c.to_string())
            .unwrap_or_else(|| format!("channel {}", pattern.tint_channel));
        let dir = if pattern.tint > 0.0 { "more" } else { "less" };
        s.push_str(&format!(" The {} turn {dir} {colour}.", region_name(pattern.region)));
    }
    s
}

fn describe<R: Rng>(config: &GeneratorConfig, class: usize, rng: &mut R) -> String {
    let pattern = class_pattern(config, class);
    let variant = rng.random_range(0..config.paraphrase_count);
    let mut text = paraphrase(&pattern, variant);
    if rng.random_bool(0.5) {
        text.push(' ');
        text.push_str(FILLERS[rng.random_range(0..FILLERS.len())]);
    }
    if rng.random::<f64>() < config.leakage_rate {
        let (noun, adjective) = EMOTION_WORDS[(class + config.pattern_offset) % EMOTION_WORDS.len()];
        if rng.random_bool(0.5) {
            text.push_str(&format!(" The person looks {adjective}."));
        } else {
            // Turn the first sentence's full stop into an inference clause.
            if let Some(pos) = text.find('.') {
                text.replace_range(pos..pos + 1, &format!(", suggesting a feeling of {noun}."));
            }
        }
    }
    text
}

/// Renders sample `index` of class `class`. Noise and description choices
/// come from a ChaCha stream keyed by `(seed, index)`, so samples can be
/// produced in any order.
pub fn render_sample(
    config: &GeneratorConfig,
    seed: u64,
    class: usize,
    index: usize,
    sample_id: &str,
) -> Result<SampleRecord> {
    let (t, h, w, c) = (config.frames, config.height, config.width, config.channels);
    let pattern = class_pattern(config, class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut parsing = Vec::with_capacity(t * h * w);
    let mut frames = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        let alpha = ramp(ti, t);
        let labels = parsing_frame(config, &pattern, ti);
        for &r in &labels {
            let base = region_level(r as usize, config.regions);
            for ch in 0..c {
                let mut v = base + 0.03 * ch as f64;
                if r as usize == pattern.region && ch == pattern.tint_channel {
                    v += alpha * pattern.tint;
                }
                if config.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                frames.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        parsing.extend(labels);
    }

    let mut landmarks = vec![0f32; t * h * w];
    for (y, x) in landmark_points(config, &pattern)? {
        for ti in 0..t {
            landmarks[(ti * h + y) * w + x] = 1.0;
        }
    }

    Ok(SampleRecord {
        sample_id: sample_id.to_string(),
        frames: NdArray::new(vec![t, h, w, c], frames)?,
        parsing_map: NdArray::new(vec![t, h, w], parsing)?,
        landmark_map: NdArray::new(vec![t, h, w], landmarks)?,
        description: describe(config, class, &mut rng),
        class_id: class,
    })
}

fn write_sample(dir: &Path, s: &SampleRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    s.frames.write(&dir.join("frames.bin"))?;
    s.parsing_map.write(&dir.join("parsing.bin"))?;
    s.landmark_map.write(&dir.join("landmarks.bin"))?;
    let p = dir.join("description.txt");
    fs::write(&p, &s.description).map_err(|e| Error::io(&p, e))
}

/// Generates a full corpus under `out_dir` and returns its manifest.
/// Identical `(config, seed)` produce byte-identical directories.
pub fn generate_corpus(config: &GeneratorConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    for k in 0..config.num_classes {
        landmark_points(config, &class_pattern(config, k))?;
    }
    fs::create_dir_all(out_dir.join("samples")).map_err(|e| Error::io(out_dir, e))?;

    let jobs: Vec<(usize, usize, String)> = (0..config.num_classes)
        .flat_map(|k| (0..config.samples_per_class).map(move |i| (k, i)))
        .enumerate()
        .map(|(idx, (k, i))| (idx, k, format!("c{k:02}_s{i:04}")))
        .collect();
    jobs.par_iter().try_for_each(|(idx, k, id)| {
        let s = render_sample(config, seed, *k, *idx, id)?;
        write_sample(&out_dir.join("samples").join(id), &s)
    })?;

    let samples = jobs
        .iter()
        .map(|(_, k, id)| ManifestEntry {
            sample_id: id.clone(),
            path: format!("samples/{id}"),
            class_id: *k,
            split: "train".into(),
        })
        .collect();
    let mut manifest = DatasetManifest {
        corpus_name: config.corpus_name.clone(),
        class_names: config.resolved_class_names(),
        samples,
        generator_config: config.clone(),
        seed,
        root: out_dir.to_path_buf(),
    };
    if config.samples_per_class >= 2 {
        let (train, test) = split_dataset(&manifest, config.train_ratio, seed)?;
        let train_ids: std::collections::HashSet<String> =
            train.samples.into_iter().map(|e| e.sample_id).collect();
        for e in &mut manifest.samples {
            if !train_ids.contains(&e.sample_id) {
                e.split = "test".into();
            }
        }
        debug_assert_eq!(
            manifest.samples.iter().filter(|e| e.split == "test").count(),
            test.samples.len()
        );
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
