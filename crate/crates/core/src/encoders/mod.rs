//! The four towers: label prompts (positive and negative adapter stacks),
//! video frames, face semantics (parsing and landmarks through one shared
//! tower) and long fine-grained descriptions.

mod config;
mod towers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::netcore::{BottleneckAdapter, Mat, ParamStore, Projection, Tape, Var};
use crate::textproc::TokenSequence;

pub use config::{ModelConfig, MAX_DESCRIPTION_LEN};
pub use towers::{TextTower, VisualAdapters, VisualTower};

/// Per-class positive and negative prompt embeddings, `[N × e]` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PNTextEmbeddings {
    pub pos: Mat,
    pub neg: Mat,
}

impl PNTextEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.pos.rows
    }
}

/// Video, parsing, landmark and description embeddings, `[B × e]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbeddings {
    pub v: Mat,
    pub p: Mat,
    pub l: Mat,
    pub f: Mat,
}

/// The frozen input stage of one sample, computed once and reused every
/// epoch.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub video: Mat,
    pub parsing: Mat,
    pub landmark: Mat,
    pub description: TokenSequence,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub label: TextTower,
    pub video: VisualTower,
    pub face: VisualTower,
    pub description: TextTower,
    pub palette: crate::netcore::ParamId,
    pub label_heads: Vec<Projection>,
    pub video_head: Projection,
    pub parsing_head: Projection,
    pub landmark_head: Projection,
    pub description_head: Projection,
}

impl Model {
    /// Builds every tower with frozen random weights drawn from
    /// `config.init_seed`, identity adapters and random heads.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = &config;
        let label = TextTower::new(&mut store, "label", c, c.label_max_len, &["pos_adapter", "neg_adapter"], &mut rng)?;
        let video = VisualTower::new(&mut store, "video", c, &mut rng)?;
        let face = VisualTower::new(&mut store, "face", c, &mut rng)?;
        let description =
            TextTower::new(&mut store, "description", c, c.description_max_len, &["adapter"], &mut rng)?;
        // Region id r is drawn as grey level r / (R - 1) on every channel.
        let palette_values = (0..c.regions)
            .flat_map(|r| std::iter::repeat_n(r as f64 / (c.regions - 1) as f64, c.channels))
            .collect();
        let palette = store.insert("face.palette", vec![c.regions, c.channels], palette_values, false)?;
        let (d, e) = (c.width, c.embed_dim);
        let label_heads = if c.shared_label_head {
            vec![Projection::new(&mut store, "label.head", d, e, true, &mut rng)?]
        } else {
            vec![
                Projection::new(&mut store, "label.pos_head", d, e, true, &mut rng)?,
                Projection::new(&mut store, "label.neg_head", d, e, true, &mut rng)?,
            ]
        };
        let video_head = Projection::new(&mut store, "video.head", d, e, true, &mut rng)?;
        let parsing_head = Projection::new(&mut store, "face.parsing_head", d, e, true, &mut rng)?;
        let landmark_head = Projection::new(&mut store, "face.landmark_head", d, e, true, &mut rng)?;
        let description_head = Projection::new(&mut store, "description.head", d, e, true, &mut rng)?;
        Ok(Model {
            config,
            store,
            label,
            video,
            face,
            description,
            palette,
            label_heads,
            video_head,
            parsing_head,
            landmark_head,
            description_head,
        })
    }

    /// Rebuilds the architecture for `config` and installs `store`, which
    /// must hold exactly the same tensor names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {} tensors, config builds {}",
                store.len(),
                model.store.len()
            )));
        }
        for (_, t) in model.store.iter() {
            match store.by_name(&t.name) {
                Some(s) if s.shape == t.shape => {}
                Some(s) => {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{}: checkpoint shape {:?}, config shape {:?}",
                        t.name, s.shape, t.shape
                    )))
                }
                None => {
                    return Err(Error::ArchitectureMismatch(format!("{} missing from checkpoint", t.name)))
                }
            }
        }
        let mut rebuilt = ParamStore::new();
        for (_, t) in model.store.iter() {
            let s = store.by_name(&t.name).expect("checked above");
            rebuilt.insert(t.name.clone(), s.shape.clone(), s.values.clone(), s.trainable)?;
        }
        model.store = rebuilt;
        Ok(model)
    }

    /// Every adapter in the model.
    pub fn adapters(&self) -> Vec<&BottleneckAdapter> {
        let mut out = Vec::new();
        for t in [&self.label, &self.description] {
            out.extend(t.stacks.iter().flatten());
        }
        for t in [&self.video, &self.face] {
            for a in &t.adapters {
                out.extend([&a.temporal, &a.spatial, &a.parallel]);
            }
        }
        out
    }

    pub fn heads(&self) -> Vec<&Projection> {
        let mut out: Vec<&Projection> = self.label_heads.iter().collect();
        out.extend([&self.video_head, &self.parsing_head, &self.landmark_head, &self.description_head]);
        out
    }

    /// Names that the parameter-efficient partition declares trainable.
    pub fn declared_trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .adapters()
            .iter()
            .flat_map(|a| a.param_ids().map(|id| self.store.get(id).name.clone()))
            .chain(self.heads().iter().map(|h| self.store.get(h.id()).name.clone()))
            .collect();
        names.sort();
        names
    }

    /// Frozen input stage for one sample.
    pub fn prepare(&self, sample: &SampleRecord, description: TokenSequence) -> Result<SampleInputs> {
        let c = &self.config;
        let dims = sample.dims();
        let want = [c.frames, c.height, c.image_width, c.channels];
        if dims != want {
            return Err(Error::shape(format!("sample {}", sample.sample_id), format!("{want:?}"), format!("{dims:?}")));
        }
        let frames: Vec<f64> = sample.frames.data.iter().map(|&v| v as f64).collect();
        let video = self.video.embed(&self.store, &frames, dims, c.patch)?;
        let (parsing, landmark) = self.face_inputs(&sample.parsing_map.data, &sample.landmark_map.data, dims)?;
        if description.valid_len > self.description.max_len() {
            return Err(Error::Invalid(format!(
                "description of {} tokens exceeds {}",
                description.valid_len,
                self.description.max_len()
            )));
        }
        Ok(SampleInputs {
            video,
            parsing,
            landmark,
            description,
        })
    }

    /// Rasterises parsing ids through the palette and broadcasts landmarks
    /// to every channel, then applies the shared face input stage.
    pub fn face_inputs(&self, parsing: &[u8], landmark: &[f32], dims: [usize; 4]) -> Result<(Mat, Mat)> {
        let [t, h, w, ch] = dims;
        let n = t * h * w;
        if parsing.len() != n || landmark.len() != n {
            return Err(Error::shape("face maps", n, parsing.len().max(landmark.len())));
        }
        let pal = self.store.get(self.palette);
        let regions = self.config.regions;
        let mut p_img = Vec::with_capacity(n * ch);
        for &r in parsing {
            let r = r as usize;
            if r >= regions {
                return Err(Error::Invalid(format!("parsing region id {r} ≥ R = {regions}")));
            }
            p_img.extend_from_slice(&pal.values[r * ch..(r + 1) * ch]);
        }
        let l_img: Vec<f64> = landmark
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v as f64, ch))
            .collect();
        let p = self.face.embed(&self.store, &p_img, dims, self.config.patch)?;
        let l = self.face.embed(&self.store, &l_img, dims, self.config.patch)?;
        Ok((p, l))
    }

    fn label_head(&self, branch: usize) -> &Projection {
        &self.label_heads[branch.min(self.label_heads.len() - 1)]
    }

    /// Label tower on the tape: `(c_pos, c_neg)`, `[N × e]` each.
    pub fn label_embeddings(
        &self,
        tape: &mut Tape,
        pos: &[TokenSequence],
        neg: &[TokenSequence],
    ) -> Result<(Var, Var)> {
        if pos.len() != neg.len() || pos.is_empty() {
            return Err(Error::Invalid(format!(
                "need matching non-empty prompt lists, got {} positive and {} negative",
                pos.len(),
                neg.len()
            )));
        }
        let mut out = Vec::with_capacity(2);
        for (branch, seqs) in [pos, neg].into_iter().enumerate() {
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let (x, segments) = self.label.embed(&self.store, &refs)?;
            let x = tape.constant(x);
            let h = self.label.forward(tape, &self.store, x, &segments, branch);
            out.push(self.label_head(branch).forward(tape, &self.store, h));
        }
        Ok((out[0], out[1]))
    }

    /// Description tower on the tape: `[n × e]`.
    pub fn description_embeddings(&self, tape: &mut Tape, seqs: &[&TokenSequence]) -> Result<Var> {
        let (x, segments) = self.description.embed(&self.store, seqs)?;
        let x = tape.constant(x);
        let h = self.description.forward(tape, &self.store, x, &segments, 0);
        Ok(self.description_head.forward(tape, &self.store, h))
    }

    /// Positive and negative prompts encoded by the description tower
    /// instead of the label tower (caption-pretrained zero-shot transfer).
    pub fn description_prompt_embeddings(
        &self,
        tape: &mut Tape,
        pos: &[TokenSequence],
        neg: &[TokenSequence],
    ) -> Result<(Var, Var)> {
        let p = self.description_embeddings(tape, &pos.iter().collect::<Vec<_>>())?;
        let n = self.description_embeddings(tape, &neg.iter().collect::<Vec<_>>())?;
        Ok((p, n))
    }

    fn stack_rows(tape: &mut Tape, mats: Vec<&Mat>) -> Var {
        let cols = mats[0].cols;
        let rows: usize = mats.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in mats {
            data.extend_from_slice(&m.data);
        }
        tape.constant(Mat::from_vec(rows, cols, data))
    }

    /// Video tower on the tape: `[B × e]`.
    pub fn video_embeddings(&self, tape: &mut Tape, batch: &[&SampleInputs]) -> Var {
        let x = Self::stack_rows(tape, batch.iter().map(|s| &s.video).collect());
        let h = self.video.forward(tape, &self.store, x, batch.len(), self.config.parallel_scale);
        self.video_head.forward(tape, &self.store, h)
    }

    /// Pooled, normalised face-tower features before the heads: parsing
    /// rows first, then landmark rows, `[2B × d]`.
    pub fn face_pooled(&self, tape: &mut Tape, batch: &[&SampleInputs]) -> Var {
        let mats: Vec<&Mat> = batch
            .iter()
            .map(|s| &s.parsing)
            .chain(batch.iter().map(|s| &s.landmark))
            .collect();
        let x = Self::stack_rows(tape, mats);
        self.face.forward(tape, &self.store, x, 2 * batch.len(), self.config.parallel_scale)
    }

    /// Face tower on the tape: `(p, l)`, `[B × e]` each.
    pub fn face_embeddings(&self, tape: &mut Tape, batch: &[&SampleInputs]) -> (Var, Var) {
        let b = batch.len();
        let pooled = self.face_pooled(tape, batch);
        let hp = tape.gather_rows(pooled, (0..b).collect());
        let hl = tape.gather_rows(pooled, (b..2 * b).collect());
        (
            self.parsing_head.forward(tape, &self.store, hp),
            self.landmark_head.forward(tape, &self.store, hl),
        )
    }

    /// The requested modalities on the tape, in `[v, p, l, f]` order.
    pub fn modality_vars(
        &self,
        tape: &mut Tape,
        batch: &[&SampleInputs],
        wanted: [bool; 4],
    ) -> Result<[Option<Var>; 4]> {
        let mut out = [None; 4];
        if wanted[0] {
            out[0] = Some(self.video_embeddings(tape, batch));
        }
        if wanted[1] || wanted[2] {
            let (p, l) = self.face_embeddings(tape, batch);
            out[1] = wanted[1].then_some(p);
            out[2] = wanted[2].then_some(l);
        }
        if wanted[3] {
            let seqs: Vec<&TokenSequence> = batch.iter().map(|s| &s.description).collect();
            out[3] = Some(self.description_embeddings(tape, &seqs)?);
        }
        Ok(out)
    }

    pub fn encode_labels(&self, pos: &[TokenSequence], neg: &[TokenSequence]) -> Result<PNTextEmbeddings> {
        let mut tape = Tape::no_grad();
        let (p, n) = self.label_embeddings(&mut tape, pos, neg)?;
        Ok(PNTextEmbeddings {
            pos: tape.value(p).clone(),
            neg: tape.value(n).clone(),
        })
    }

    /// `[e]` embedding of one clip.
    pub fn encode_video(&self, frames: &crate::corpus::NdArray<f32>) -> Result<Vec<f64>> {
        let s = &frames.shape;
        if s.len() != 4 {
            return Err(Error::shape("frames rank", 4, s.len()));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data: Vec<f64> = frames.data.iter().map(|&v| v as f64).collect();
        let x = self.video.embed(&self.store, &data, dims, self.config.patch)?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let h = self.video.forward(&mut tape, &self.store, xv, 1, self.config.parallel_scale);
        let v = self.video_head.forward(&mut tape, &self.store, h);
        Ok(tape.value(v).data.clone())
    }

    /// `(p, l)` embeddings of one clip's face maps.
    pub fn encode_face_semantics(
        &self,
        parsing: &crate::corpus::NdArray<u8>,
        landmark: &crate::corpus::NdArray<f32>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if parsing.shape.len() != 3 || parsing.shape != landmark.shape {
            return Err(Error::shape(
                "face maps",
                format!("{:?}", parsing.shape),
                format!("{:?}", landmark.shape),
            ));
        }
        let s = &parsing.shape;
        let dims = [s[0], s[1], s[2], self.config.channels];
        let (p, l) = self.face_inputs(&parsing.data, &landmark.data, dims)?;
        let inputs = SampleInputs {
            video: Mat::zeros(0, 0),
            parsing: p,
            landmark: l,
            description: TokenSequence {
                ids: vec![],
                valid_len: 0,
                terminal_pos: 0,
            },
        };
        let mut tape = Tape::no_grad();
        let (p, l) = self.face_embeddings(&mut tape, &[&inputs]);
        Ok((tape.value(p).data.clone(), tape.value(l).data.clone()))
    }

    pub fn encode_description(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let f = self.description_embeddings(&mut tape, &[tokens])?;
        Ok(tape.value(f).data.clone())
    }

    /// All four embeddings for a batch, without gradient tracking.
    pub fn encode_batch(&self, batch: &[&SampleInputs]) -> Result<ModalityEmbeddings> {
        let mut tape = Tape::no_grad();
        let vars = self.modality_vars(&mut tape, batch, [true; 4])?;
        let [v, p, l, f] = vars.map(|x| tape.value(x.expect("requested")).clone());
        Ok(ModalityEmbeddings { v, p, l, f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn partition_is_exactly_adapters_and_heads() {
        let m = Model::new(cfg()).unwrap();
        let mut names = m.store.trainable_names();
        names.sort();
        assert_eq!(names, m.declared_trainable_names());
        for n in m.store.trainable_names() {
            assert!(n.contains("adapter") || n.ends_with("head.weight"), "{n}");
        }
    }

    #[test]
    fn analytic_counts_match_allocation() {
        for c in [
            cfg(),
            ModelConfig { adapters: false, ..cfg() },
            ModelConfig { shared_label_head: false, layers: 3, patch: 16, ..cfg() },
        ] {
            let m = Model::new(c.clone()).unwrap();
            assert_eq!(c.param_counts(), (m.store.trainable_count(), m.store.total_count()));
        }
    }

    #[test]
    fn reference_scale_trainable_share_is_small() {
        let (t, total) = ModelConfig::reference_scale(49_408).param_counts();
        assert!((t as f64) <= 0.25 * total as f64, "{t} of {total}");
    }

    #[test]
    fn no_adapters_means_heads_only() {
        let m = Model::new(ModelConfig { adapters: false, ..cfg() }).unwrap();
        assert!(m.adapters().is_empty());
        assert_eq!(m.store.trainable_names().len(), 5);
    }

    #[test]
    fn pos_and_neg_stacks_start_identical() {
        let m = Model::new(cfg()).unwrap();
        for (a, b) in m.label.stacks[0].iter().zip(&m.label.stacks[1]) {
            for (x, y) in a.param_ids().iter().zip(b.param_ids()) {
                assert_eq!(m.store.get(*x).values, m.store.get(y).values);
            }
        }
    }

    #[test]
    fn config_bounds() {
        assert!(ModelConfig { description_max_len: 249, ..cfg() }.validate().is_err());
        assert!(ModelConfig { patch: 5, ..cfg() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..cfg() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_err());
        let c = cfg();
        assert!(c.description_max_len >= 64 && c.description_max_len <= MAX_DESCRIPTION_LEN);
    }
}
