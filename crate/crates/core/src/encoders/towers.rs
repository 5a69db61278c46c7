//! Visual and text towers over the shared tape.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::netcore::{AttnSpec, BottleneckAdapter, Mat, ParamId, ParamStore, Tape, TransformerBlock, Var};
use crate::textproc::TokenSequence;

use super::config::ModelConfig;

fn adapter_std(width: usize) -> f64 {
    1.0 / (width as f64).sqrt()
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.filled(&format!("{prefix}.gain"), vec![d], 1.0, false)?,
        store.zeros(&format!("{prefix}.bias"), vec![d], false)?,
    ))
}

fn apply_ln(tape: &mut Tape, store: &ParamStore, x: Var, ln: (ParamId, ParamId)) -> Var {
    let g = tape.param(store, ln.0);
    let b = tape.param(store, ln.1);
    tape.layer_norm(x, g, b)
}

/// Adapters of one visual block: before the temporal pass, before the
/// spatial pass, and the scaled branch parallel to the MLP.
#[derive(Clone, Debug)]
pub struct VisualAdapters {
    pub temporal: BottleneckAdapter,
    pub spatial: BottleneckAdapter,
    pub parallel: BottleneckAdapter,
}

/// Patch-embedded video-like input → per-sequence pooled feature.
#[derive(Clone, Debug)]
pub struct VisualTower {
    pub prefix: String,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub adapters: Vec<VisualAdapters>,
    pub ln_post: (ParamId, ParamId),
    frames: usize,
    patches: usize,
}

impl VisualTower {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        let m = cfg.patches_per_frame();
        let pd = cfg.patch_dim();
        let p = |s: &str| format!("{prefix}.{s}");
        let patch_weight = store.normal(&p("patch_embed.weight"), vec![pd, d], 1.0 / (pd as f64).sqrt(), false, rng)?;
        let patch_bias = store.zeros(&p("patch_embed.bias"), vec![d], false)?;
        let pos_std = adapter_std(d);
        let pos_spatial = store.normal(&p("pos_spatial"), vec![m, d], pos_std, false, rng)?;
        let pos_temporal = store.normal(&p("pos_temporal"), vec![cfg.frames, d], pos_std, false, rng)?;
        let mut blocks = Vec::new();
        let mut adapters = Vec::new();
        for j in 0..cfg.layers {
            blocks.push(TransformerBlock::new(store, &p(&format!("block{j}")), d, cfg.heads, false, rng)?);
            if cfg.adapters {
                let mut mk = |kind: &str, rng: &mut R| {
                    BottleneckAdapter::new(store, &p(&format!("{kind}_adapter{j}")), d, cfg.bottleneck, adapter_std(d), rng)
                };
                let temporal = mk("temporal", rng)?;
                let spatial = mk("spatial", rng)?;
                let parallel = mk("parallel", rng)?;
                adapters.push(VisualAdapters { temporal, spatial, parallel });
            }
        }
        let ln_post = layer_norm_params(store, &p("ln_post"), d)?;
        Ok(VisualTower {
            prefix: prefix.to_string(),
            patch_weight,
            patch_bias,
            pos_spatial,
            pos_temporal,
            blocks,
            adapters,
            ln_post,
            frames: cfg.frames,
            patches: m,
        })
    }

    /// Frozen input stage: `[T × H × W × C]` → `[T·M × d]` patch embeddings
    /// plus spatial and temporal positional encodings.
    pub fn embed(&self, store: &ParamStore, frames: &[f64], dims: [usize; 4], patch: usize) -> Result<Mat> {
        if dims[0] != self.frames {
            return Err(Error::shape(format!("{} frames", self.prefix), self.frames, dims[0]));
        }
        let w = store.get(self.patch_weight).as_mat();
        let b = &store.get(self.patch_bias).values;
        let mut x = crate::netcore::patch_embed(frames, dims, patch, &w, b)?;
        if x.rows != self.frames * self.patches {
            return Err(Error::shape(format!("{} patches", self.prefix), self.frames * self.patches, x.rows));
        }
        let ps = store.get(self.pos_spatial).as_mat();
        let pt = store.get(self.pos_temporal).as_mat();
        for t in 0..self.frames {
            for m in 0..self.patches {
                let row = x.row_mut(t * self.patches + m);
                for ((v, a), b) in row.iter_mut().zip(ps.row(m)).zip(pt.row(t)) {
                    *v += a + b;
                }
            }
        }
        Ok(x)
    }

    /// Attention layouts for `n` stacked sequences of `T·M` rows: one group
    /// per (sequence, patch) along time, one per (sequence, frame) across
    /// patches.
    pub fn specs(&self, n: usize) -> (Rc<AttnSpec>, Rc<AttnSpec>) {
        let (t, m) = (self.frames, self.patches);
        let mut temporal = Vec::with_capacity(n * m);
        let mut spatial = Vec::with_capacity(n * t);
        for s in 0..n {
            let base = s * t * m;
            for pi in 0..m {
                temporal.push((0..t).map(|ti| base + ti * m + pi).collect());
            }
            for ti in 0..t {
                spatial.push((base + ti * m..base + (ti + 1) * m).collect());
            }
        }
        let mk = |groups| {
            Rc::new(AttnSpec {
                groups,
                causal: false,
                key_valid: None,
            })
        };
        (mk(temporal), mk(spatial))
    }

    /// Runs every block over `x: [n·T·M × d]`; returns the last-layer tokens.
    pub fn blocks_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, n: usize, scale: f64) -> Var {
        let (temporal, spatial) = self.specs(n);
        let mut z = x;
        for (j, block) in self.blocks.iter().enumerate() {
            let ad = self.adapters.get(j);
            let y = match ad {
                Some(a) => a.temporal.forward(tape, store, z),
                None => z,
            };
            let z_t = block.attention_sublayer(tape, store, y, temporal.clone());
            let y = match ad {
                Some(a) => a.spatial.forward(tape, store, z_t),
                None => z_t,
            };
            let z_s = block.attention_sublayer(tape, store, y, spatial.clone());
            let h = block.ln2(tape, store, z_s);
            let mlp = block.mlp(tape, store, h);
            let mut out = tape.add(z_s, mlp);
            if let Some(a) = ad {
                if scale != 0.0 {
                    let br = a.parallel.branch(tape, store, h);
                    let br = tape.scale(br, scale);
                    out = tape.add(out, br);
                }
            }
            z = out;
        }
        z
    }

    /// Mean over each sequence's `T·M` tokens followed by the final norm:
    /// `[n × d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, n: usize, scale: f64) -> Var {
        let z = self.blocks_forward(tape, store, x, n, scale);
        let tm = self.frames * self.patches;
        let pooled = tape.segment_mean(z, (0..n).map(|s| (s * tm, tm)).collect());
        apply_ln(tape, store, pooled, self.ln_post)
    }

    pub fn tokens_per_sequence(&self) -> usize {
        self.frames * self.patches
    }
}

/// Causal text tower with one or more adapter stacks over shared frozen
/// blocks.
#[derive(Clone, Debug)]
pub struct TextTower {
    pub prefix: String,
    pub token_embedding: ParamId,
    pub pos_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// `stacks[k][j]` is the adapter of stack `k` before block `j`.
    pub stacks: Vec<Vec<BottleneckAdapter>>,
    pub ln_final: (ParamId, ParamId),
    max_len: usize,
    vocab_size: usize,
}

impl TextTower {
    /// Stacks named `stack_names[k]` are initialised from the same draw, so
    /// they start identical.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        max_len: usize,
        stack_names: &[&str],
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.width;
        let p = |s: &str| format!("{prefix}.{s}");
        let token_embedding = store.normal(&p("token_embedding"), vec![cfg.vocab_size, d], 1.0, false, rng)?;
        let pos_embedding = store.normal(&p("pos_embedding"), vec![max_len, d], adapter_std(d), false, rng)?;
        let mut blocks = Vec::new();
        let mut stacks: Vec<Vec<BottleneckAdapter>> = vec![Vec::new(); stack_names.len()];
        for j in 0..cfg.layers {
            blocks.push(TransformerBlock::new(store, &p(&format!("block{j}")), d, cfg.heads, false, rng)?);
            if cfg.adapters {
                let mut first: Option<ParamId> = None;
                for (k, name) in stack_names.iter().enumerate() {
                    let a = BottleneckAdapter::new(store, &p(&format!("{name}{j}")), d, cfg.bottleneck, adapter_std(d), rng)?;
                    let down = a.param_ids()[0];
                    match first {
                        None => first = Some(down),
                        Some(src) => {
                            let v = store.get(src).values.clone();
                            store.get_mut(down).values = v;
                        }
                    }
                    stacks[k].push(a);
                }
            }
        }
        let ln_final = layer_norm_params(store, &p("ln_final"), d)?;
        Ok(TextTower {
            prefix: prefix.to_string(),
            token_embedding,
            pos_embedding,
            blocks,
            stacks,
            ln_final,
            max_len,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Frozen input rows (word + positional embedding) of the valid prefix
    /// of every sequence, stacked; also returns each sequence's segment.
    pub fn embed(&self, store: &ParamStore, seqs: &[&TokenSequence]) -> Result<(Mat, Vec<(usize, usize)>)> {
        let tok = store.get(self.token_embedding);
        let pos = store.get(self.pos_embedding);
        let d = tok.dims2().1;
        let total: usize = seqs.iter().map(|s| s.valid_len).sum();
        let mut x = Mat::zeros(total, d);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut row = 0;
        for s in seqs {
            if s.valid_len == 0 || s.terminal_pos + 1 != s.valid_len || s.terminal_pos >= s.ids.len() {
                return Err(Error::Invalid(format!(
                    "{}: terminal_pos {} inconsistent with valid_len {}",
                    self.prefix, s.terminal_pos, s.valid_len
                )));
            }
            if s.terminal_pos >= self.max_len {
                return Err(Error::Invalid(format!(
                    "{}: terminal_pos {} out of range for {} positions",
                    self.prefix, s.terminal_pos, self.max_len
                )));
            }
            for (i, &id) in s.ids[..s.valid_len].iter().enumerate() {
                if id >= self.vocab_size {
                    return Err(Error::Invalid(format!("{}: token id {id} ≥ vocab size", self.prefix)));
                }
                let dst = x.row_mut(row + i);
                let te = &tok.values[id * d..(id + 1) * d];
                let pe = &pos.values[i * d..(i + 1) * d];
                for ((o, a), b) in dst.iter_mut().zip(te).zip(pe) {
                    *o = a + b;
                }
            }
            segments.push((row, s.valid_len));
            row += s.valid_len;
        }
        Ok((x, segments))
    }

    /// Normalised hidden state at each sequence's end marker: `[n × d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
        stack: usize,
    ) -> Var {
        let spec = Rc::new(AttnSpec::contiguous(segments, true));
        let mut z = x;
        for (j, block) in self.blocks.iter().enumerate() {
            if let Some(a) = self.stacks.get(stack).and_then(|s| s.get(j)) {
                z = a.forward(tape, store, z);
            }
            z = block.forward(tape, store, z, spec.clone());
        }
        let last: Vec<usize> = segments.iter().map(|&(s, l)| s + l - 1).collect();
        let t = tape.gather_rows(z, last);
        apply_ln(tape, store, t, self.ln_final)
    }
}
