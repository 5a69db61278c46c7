//! Transformer blocks, bottleneck adapters, patch embedding and projection
//! heads, expressed over a [`Tape`].

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

use super::mat::Mat;
use super::params::{ParamId, ParamStore};
use super::tape::{AttnSpec, Tape, Var};

/// Pre-norm transformer block: `h = x + MHA(LN1(x))`, `y = h + MLP(LN2(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl TransformerBlock {
    /// Registers a block under `prefix`. Blocks are frozen unless
    /// `trainable` is set (gradient tests flip it).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: heads {heads} must divide width {width}"
            )));
        }
        let d = width;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_hidden = 1.0 / ((4 * d) as f64).sqrt();
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(TransformerBlock {
            name: prefix.to_string(),
            width,
            heads,
            ln1_g: store.filled(&p("ln1.gain"), vec![d], 1.0, trainable)?,
            ln1_b: store.zeros(&p("ln1.bias"), vec![d], trainable)?,
            qkv_w: store.normal(&p("attn.qkv.weight"), vec![d, 3 * d], std_in, trainable, rng)?,
            qkv_b: store.zeros(&p("attn.qkv.bias"), vec![3 * d], trainable)?,
            out_w: store.normal(&p("attn.out.weight"), vec![d, d], std_in, trainable, rng)?,
            out_b: store.zeros(&p("attn.out.bias"), vec![d], trainable)?,
            ln2_g: store.filled(&p("ln2.gain"), vec![d], 1.0, trainable)?,
            ln2_b: store.zeros(&p("ln2.bias"), vec![d], trainable)?,
            fc_w: store.normal(&p("mlp.fc.weight"), vec![d, 4 * d], std_in, trainable, rng)?,
            fc_b: store.zeros(&p("mlp.fc.bias"), vec![4 * d], trainable)?,
            proj_w: store.normal(&p("mlp.proj.weight"), vec![4 * d, d], std_hidden, trainable, rng)?,
            proj_b: store.zeros(&p("mlp.proj.bias"), vec![d], trainable)?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 12] {
        [
            self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.out_w, self.out_b, self.ln2_g,
            self.ln2_b, self.fc_w, self.fc_b, self.proj_w, self.proj_b,
        ]
    }

    /// `x + MHA(LN1(x))` with attention restricted by `spec`.
    pub fn attention_sublayer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        spec: Rc<AttnSpec>,
    ) -> Var {
        let d = self.width;
        let g = tape.param(store, self.ln1_g);
        let b = tape.param(store, self.ln1_b);
        let h = tape.layer_norm(x, g, b);
        let w = tape.param(store, self.qkv_w);
        let bias = tape.param(store, self.qkv_b);
        let qkv = tape.linear(h, w, Some(bias));
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let a = tape.attention(q, k, v, self.heads, spec);
        let w = tape.param(store, self.out_w);
        let bias = tape.param(store, self.out_b);
        let o = tape.linear(a, w, Some(bias));
        tape.add(x, o)
    }

    /// `LN2(x)`, the input of the MLP sublayer.
    pub fn ln2(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.ln2_g);
        let b = tape.param(store, self.ln2_b);
        tape.layer_norm(x, g, b)
    }

    /// The MLP path `proj(GELU(fc(h)))` applied to an already-normalised `h`.
    pub fn mlp(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let w = tape.param(store, self.fc_w);
        let b = tape.param(store, self.fc_b);
        let u = tape.linear(h, w, Some(b));
        let u = tape.gelu(u);
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        tape.linear(u, w, Some(b))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, spec: Rc<AttnSpec>) -> Var {
        let h = self.attention_sublayer(tape, store, x, spec);
        let n = self.ln2(tape, store, h);
        let m = self.mlp(tape, store, n);
        tape.add(h, m)
    }
}

/// Houlsby-style bottleneck: `y = x + Up(GELU(Down(x)))`.
#[derive(Clone, Debug)]
pub struct BottleneckAdapter {
    pub name: String,
    pub width: usize,
    pub bottleneck: usize,
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

impl BottleneckAdapter {
    /// Down-projection drawn from `N(0, down_std²)`, up-projection zeroed so
    /// the adapter starts as the identity map.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        bottleneck: usize,
        down_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || width == 0 {
            return Err(Error::Config(format!("{prefix}: adapter widths must be ≥ 1")));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(BottleneckAdapter {
            name: prefix.to_string(),
            width,
            bottleneck,
            down_w: store.normal(&p("down.weight"), vec![width, bottleneck], down_std, true, rng)?,
            down_b: store.zeros(&p("down.bias"), vec![bottleneck], true)?,
            up_w: store.zeros(&p("up.weight"), vec![bottleneck, width], true)?,
            up_b: store.zeros(&p("up.bias"), vec![width], true)?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.down_w, self.down_b, self.up_w, self.up_b]
    }

    /// Overwrites the up-projection with random values so the adapter is no
    /// longer the identity (untrained-baseline experiments).
    pub fn randomize_up<R: Rng>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut store.get_mut(self.up_w).values {
            *v = normal.sample(rng);
        }
    }

    /// The residual-free branch `Up(GELU(Down(x)))`.
    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.down_w);
        let b = tape.param(store, self.down_b);
        let h = tape.linear(x, w, Some(b));
        let h = tape.gelu(h);
        let w = tape.param(store, self.up_w);
        let b = tape.param(store, self.up_b);
        tape.linear(h, w, Some(b))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.branch(tape, store, x);
        tape.add(x, y)
    }
}

/// Linear projection head `x · W` (no bias), `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub name: String,
    weight: ParamId,
}

impl Projection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (input as f64).sqrt();
        Ok(Projection {
            name: name.to_string(),
            weight: store.normal(&format!("{name}.weight"), vec![input, output], std, trainable, rng)?,
        })
    }

    pub fn id(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        tape.matmul(x, w, false)
    }
}

/// Attention mask for a single sequence.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    Causal,
    /// Keys with `false` are masked for every query.
    Padding(Vec<bool>),
}

/// One adapter applied to `[S × d]` outside any larger graph.
pub fn adapter_forward(x: &Mat, adapter: &BottleneckAdapter, store: &ParamStore) -> Result<Mat> {
    if x.cols != adapter.width {
        return Err(Error::shape(
            format!("adapter {}", adapter.name),
            format!("width {}", adapter.width),
            format!("width {}", x.cols),
        ));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let y = adapter.forward(&mut tape, store, xv);
    Ok(tape.value(y).clone())
}

/// One block applied to a single `[S × d]` sequence.
pub fn block_forward(
    x: &Mat,
    block: &TransformerBlock,
    store: &ParamStore,
    mask: &AttnMask,
) -> Result<Mat> {
    if x.cols != block.width {
        return Err(Error::shape(
            format!("block {}", block.name),
            format!("width {}", block.width),
            format!("width {}", x.cols),
        ));
    }
    let spec = match mask {
        AttnMask::None => AttnSpec::contiguous(&[(0, x.rows)], false),
        AttnMask::Causal => AttnSpec::contiguous(&[(0, x.rows)], true),
        AttnMask::Padding(valid) => {
            if valid.len() != x.rows {
                return Err(Error::shape("padding mask", x.rows, valid.len()));
            }
            AttnSpec {
                groups: vec![(0..x.rows).collect()],
                causal: false,
                key_valid: Some(valid.clone()),
            }
        }
    };
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, store, xv, Rc::new(spec));
    let out = tape.value(y).clone();
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("block {}", block.name)));
    }
    Ok(out)
}

/// Splits `frames: [T × H × W × C]` into non-overlapping `P × P` patches,
/// returning `[T·M × P²C]` with frames outermost and patches row-major.
pub fn extract_patches(
    frames: &[f64],
    dims: [usize; 4],
    patch: usize,
) -> Result<Mat> {
    let [t, h, w, c] = dims;
    if frames.len() != t * h * w * c {
        return Err(Error::shape("frames", t * h * w * c, frames.len()));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} must divide spatial size {h}×{w}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let m = ph * pw;
    let feat = patch * patch * c;
    let mut out = Mat::zeros(t * m, feat);
    for ti in 0..t {
        for pi in 0..ph {
            for pj in 0..pw {
                let row = ti * m + pi * pw + pj;
                let dst = out.row_mut(row);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((ti * h + pi * patch + y) * w + pj * patch + x) * c;
                        dst[k..k + c].copy_from_slice(&frames[base..base + c]);
                        k += c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch embedding `[T × H × W × C] → [T·M × d]` through a linear map
/// `weight: [P²C × d]`, `bias: [d]`.
pub fn patch_embed(
    frames: &[f64],
    dims: [usize; 4],
    patch: usize,
    weight: &Mat,
    bias: &[f64],
) -> Result<Mat> {
    let patches = extract_patches(frames, dims, patch)?;
    if weight.rows != patches.cols || weight.cols != bias.len() {
        return Err(Error::shape(
            "patch projection",
            format!("[{} × {}]", patches.cols, bias.len()),
            format!("[{} × {}]", weight.rows, weight.cols),
        ));
    }
    let mut out = super::mat::matmul(&patches, weight, false);
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::grad_check_tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
    }

    #[test]
    fn adapter_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = BottleneckAdapter::new(&mut store, "a", 8, 2, 0.5, &mut rng).unwrap();
        for seed in 0..20 {
            let x = random_mat(5, 8, seed);
            let y = adapter_forward(&x, &a, &store).unwrap();
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adapter_zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = BottleneckAdapter::new(&mut store, "a", 8, 2, 0.5, &mut rng).unwrap();
        a.randomize_up(&mut store, 0.5, &mut rng);
        let y = adapter_forward(&Mat::zeros(3, 8), &a, &store).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adapter_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = BottleneckAdapter::new(&mut store, "a", 8, 2, 0.5, &mut rng).unwrap();
        assert!(matches!(
            adapter_forward(&Mat::zeros(3, 7), &a, &store),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adapter_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let a = BottleneckAdapter::new(&mut store, "a", 8, 2, 0.5, &mut rng).unwrap();
        a.randomize_up(&mut store, 0.5, &mut rng);
        let [dw, db, uw, ub] = a.param_ids();
        for v in &mut store.get_mut(db).values {
            *v = 0.1;
        }
        for v in &mut store.get_mut(ub).values {
            *v = -0.2;
        }
        let x = random_mat(4, 8, 3);
        let y = adapter_forward(&x, &a, &store).unwrap();

        let (dwv, dbv) = (&store.get(dw).values, &store.get(db).values);
        let (uwv, ubv) = (&store.get(uw).values, &store.get(ub).values);
        for s in 0..4 {
            let mut hidden = [0.0f64; 2];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = dbv[j];
                for i in 0..8 {
                    acc += x.get(s, i) * dwv[i * 2 + j];
                }
                let u = 0.797_884_560_802_865_4 * (acc + 0.044715 * acc.powi(3));
                *h = 0.5 * acc * (1.0 + u.tanh());
            }
            for i in 0..8 {
                let mut out = x.get(s, i) + ubv[i];
                for (j, h) in hidden.iter().enumerate() {
                    out += h * uwv[j * 8 + i];
                }
                assert!((out - y.get(s, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_preserves_shape_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, "blk", 8, 2, false, &mut rng).unwrap();
        let x = random_mat(6, 8, 9);
        let y = block_forward(&x, &b, &store, &AttnMask::Causal).unwrap();
        assert_eq!(y.shape(), x.shape());

        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let spec = Rc::new(AttnSpec::contiguous(&[(0, 6)], false));
        let q = tape.constant(random_mat(6, 8, 1));
        let k = tape.constant(random_mat(6, 8, 2));
        let a = tape.attention(q, k, xv, 2, spec);
        for h in 0..2 {
            let p = tape.attention_probs(a, 0, h).unwrap();
            for i in 0..6 {
                let s: f64 = p[i * 6..(i + 1) * 6].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_mask_leaves_single_visible_key() {
        // With every key but #2 masked, each query's attention output is the
        // value projection of row 2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, "blk", 8, 2, false, &mut rng).unwrap();
        let x = random_mat(4, 8, 12);
        let spec = Rc::new(AttnSpec {
            groups: vec![(0..4).collect()],
            causal: false,
            key_valid: Some(vec![false, false, true, false]),
        });
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let [g, bb, qw, qb, ..] = b.param_ids();
        let gv = tape.param(&store, g);
        let bv = tape.param(&store, bb);
        let h = tape.layer_norm(xv, gv, bv);
        let w = tape.param(&store, qw);
        let bias = tape.param(&store, qb);
        let qkv = tape.linear(h, w, Some(bias));
        let q = tape.slice_cols(qkv, 0, 8);
        let k = tape.slice_cols(qkv, 8, 8);
        let v = tape.slice_cols(qkv, 16, 8);
        let a = tape.attention(q, k, v, 2, spec);
        let vv = tape.value(v).row(2).to_vec();
        for i in 0..4 {
            for (p, q) in tape.value(a).row(i).iter().zip(&vv) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        let y = block_forward(&x, &b, &store, &AttnMask::Padding(vec![false, false, true, false]))
            .unwrap();
        assert_eq!(y.shape(), (4, 8));
    }

    #[test]
    fn single_position_block_matches_hand_trace_at_width_two() {
        // d = 2, one head, S = 1: the softmax over one key is 1, so the
        // attention output equals the value vector. With the parameters below
        // every intermediate is traced by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, "blk", 2, 1, false, &mut rng).unwrap();
        let [_, _, qkv_w, _, out_w, _, _, _, fc_w, _, proj_w, _] = b.param_ids();
        // v = LN1(x) · Wv, Wv = I; out projection = I.
        let mut w = vec![0.0; 2 * 6];
        w[4] = 1.0; // row 0, col 4 (v0)
        w[6 + 5] = 1.0; // row 1, col 5 (v1)
        store.get_mut(qkv_w).values = w;
        store.get_mut(out_w).values = vec![1.0, 0.0, 0.0, 1.0];
        // fc: [2 × 8], only unit 0 active = h0; proj: [8 × 2] row 0 = (1, 0).
        let mut fc = vec![0.0; 16];
        fc[0] = 1.0;
        store.get_mut(fc_w).values = fc;
        let mut proj = vec![0.0; 16];
        proj[0] = 1.0;
        store.get_mut(proj_w).values = proj;

        let x = Mat::from_vec(1, 2, vec![3.0, 1.0]);
        let y = block_forward(&x, &b, &store, &AttnMask::None).unwrap();

        // LN((3,1)) = (1,-1)·(1/sqrt(1+1e-5)).
        let ln = 1.0 / (1.0f64 + 1e-5).sqrt();
        let h = [3.0 + ln, 1.0 - ln];
        // LN(h): mean-centred, deviation (h0-h1)/2 each.
        let dev = (h[0] - h[1]) / 2.0;
        let n0 = dev / (dev * dev + 1e-5).sqrt();
        let g = 0.5 * n0 * (1.0 + (0.797_884_560_802_865_4 * (n0 + 0.044715 * n0.powi(3))).tanh());
        let want = [h[0] + g, h[1]];
        assert!((y.get(0, 0) - want[0]).abs() < 1e-12, "{:?} vs {want:?}", y.data);
        assert!((y.get(0, 1) - want[1]).abs() < 1e-12);
    }

    #[test]
    fn patch_counts() {
        let frames = vec![0.0; 32 * 32 * 3];
        assert_eq!(extract_patches(&frames, [1, 32, 32, 3], 8).unwrap().rows, 16);
        let frames = vec![0.0; 224 * 224 * 3];
        assert_eq!(extract_patches(&frames, [1, 224, 224, 3], 16).unwrap().rows, 196);
        assert!(extract_patches(&vec![0.0; 30 * 30 * 3], [1, 30, 30, 3], 8).is_err());
    }

    #[test]
    fn identity_projection_returns_raw_patches() {
        let (t, h, w, c, p) = (2, 4, 4, 2, 2);
        let frames: Vec<f64> = (0..t * h * w * c).map(|v| v as f64).collect();
        let feat = p * p * c;
        let mut eye = Mat::zeros(feat, feat);
        for i in 0..feat {
            eye.data[i * feat + i] = 1.0;
        }
        let out = patch_embed(&frames, [t, h, w, c], p, &eye, &vec![0.0; feat]).unwrap();
        let raw = extract_patches(&frames, [t, h, w, c], p).unwrap();
        assert_eq!(out, raw);
        // Second patch of frame 0 starts at pixel (0, 2).
        assert_eq!(raw.row(1)[0], ((0 * 4 + 2) * 2) as f64);
        // Frame 1 begins after M = 4 patches.
        assert_eq!(raw.row(4)[0], (h * w * c) as f64);
    }

    #[test]
    fn block_and_adapter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, "blk", 8, 2, true, &mut rng).unwrap();
        let a = BottleneckAdapter::new(&mut store, "ad", 8, 2, 0.5, &mut rng).unwrap();
        a.randomize_up(&mut store, 0.5, &mut rng);
        let x = store
            .insert("x", vec![5, 8], random_mat(5, 8, 4).data, true)
            .unwrap();
        let spec = Rc::new(AttnSpec::contiguous(&[(0, 5)], true));
        let rep = grad_check_tape(
            &store,
            |t, s| {
                let xv = t.param(s, x);
                let h = a.forward(t, s, xv);
                let y = b.forward(t, s, h, spec.clone());
                let sq = t.matmul(y, y, true);
                let tr = t.gather_rows(sq, vec![0]);
                let out = t.sum_all(tr);
                Ok(t.scale(out, 0.1))
            },
            1e-4,
            12,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
