#![allow(dead_code)]

pub mod oracle;

use pnfer_core::corpus::{generate_corpus, load_all, DatasetManifest, GeneratorConfig, SampleRecord};
use pnfer_core::training::TrainConfig;

/// A corpus small enough to train in a few seconds.
pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        samples_per_class: 6,
        frames: 2,
        height: 24,
        width: 24,
        train_ratio: 0.5,
        ..GeneratorConfig::default()
    }
}

pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

pub fn corpus(cfg: &GeneratorConfig, seed: u64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(cfg, seed, dir.path()).unwrap();
    let train = load_all(&manifest.subset("train")).unwrap();
    let test = load_all(&manifest.subset("test")).unwrap();
    Corpus { dir, manifest, train, test }
}

pub fn tiny_train_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    c.model.width = 16;
    c.model.heads = 2;
    c.model.layers = 1;
    c.model.bottleneck = 4;
    c.model.embed_dim = 16;
    c.model.label_max_len = 12;
    c.model.description_max_len = 48;
    c
}
