//! Shared fixtures for the benchmarks.

use pnfer_core::corpus::{generate_corpus, load_all, GeneratorConfig, SampleRecord};
use pnfer_core::encoders::SampleInputs;
use pnfer_core::textproc::EmotionLexicon;
use pnfer_core::training::{TrainConfig, TrainedModel};

pub struct Fixture {
    pub trained: TrainedModel,
    pub samples: Vec<SampleRecord>,
    pub inputs: Vec<SampleInputs>,
    pub lexicon: EmotionLexicon,
    _dir: tempfile::TempDir,
}

/// A freshly initialised default-size model over `per_class` samples of
/// each class.
pub fn fixture(per_class: usize) -> Fixture {
    let dir = tempfile::tempdir().expect("temp dir");
    let gen = GeneratorConfig {
        samples_per_class: per_class,
        leakage_rate: 0.5,
        ..GeneratorConfig::default()
    };
    let manifest = generate_corpus(&gen, 0, dir.path()).expect("corpus");
    let samples = load_all(&manifest).expect("samples");
    let lexicon = EmotionLexicon::default();
    let trained = TrainedModel::initialize(&manifest, &samples, &TrainConfig::default(), &lexicon).expect("model");
    let inputs = trained.prepare_all(&samples, &lexicon).expect("inputs");
    Fixture {
        trained,
        samples,
        inputs,
        lexicon,
        _dir: dir,
    }
}
