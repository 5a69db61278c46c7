//! Positive-minus-negative cosine similarity, adaptive modality weights,
//! weighted fusion and temperature-softmax classification.
//!
//! Plain functions work on single vectors; [`FusionGraph`] builds the same
//! computation for a batch on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::encoders::PNTextEmbeddings;
use crate::error::{Error, Result};
use crate::netcore::{Mat, Tape, Var};

/// Modality order used by every `[_; 4]` array in this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Parsing,
    Landmark,
    Description,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Video,
        Modality::Parsing,
        Modality::Landmark,
        Modality::Description,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['v', 'p', 'l', 'f'][self.index()]
    }

    pub fn from_letter(c: char) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.letter() == c)
    }
}

/// Set of modalities taking part in fusion, written like `vplf`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet(pub [bool; 4]);

impl ModalitySet {
    pub const FULL: ModalitySet = ModalitySet([true; 4]);

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = [false; 4];
        for c in s.trim().chars().filter(|c| !matches!(c, '{' | '}' | ',' | ' ')) {
            let m = Modality::from_letter(c)
                .ok_or_else(|| Error::Config(format!("unknown modality {c:?} in {s:?}")))?;
            set[m.index()] = true;
        }
        if !set[Modality::Video.index()] {
            return Err(Error::Config(format!("modality set {s:?} must include v")));
        }
        Ok(ModalitySet(set))
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }
}

impl std::fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for m in self.active() {
            write!(f, "{}", m.letter())?;
        }
        Ok(())
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ModalitySet::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Fusion weights over `[v, p, l, f]`. Active weights are positive and sum
/// to 1; inactive ones are exactly 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: [f64; 4],
    pub active: ModalitySet,
}

impl FusionWeights {
    /// All four modalities; each weight must lie in the open interval (0, 1).
    pub fn new(w: [f64; 4]) -> Result<Self> {
        Self::masked(w, ModalitySet::FULL)
    }

    pub fn masked(w: [f64; 4], active: ModalitySet) -> Result<Self> {
        if active.is_empty() {
            return Err(Error::Invalid("fusion needs at least one modality".into()));
        }
        let mut sum = 0.0;
        for m in Modality::ALL {
            let v = w[m.index()];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("fusion weight {}", m.letter())));
            }
            if active.contains(m) {
                let upper_ok = if active.len() == 1 { v <= 1.0 } else { v < 1.0 };
                if !(v > 0.0 && upper_ok) {
                    return Err(Error::Invalid(format!(
                        "fusion weight {} = {v} is outside the open simplex",
                        m.letter()
                    )));
                }
            } else if v != 0.0 {
                return Err(Error::Invalid(format!(
                    "inactive modality {} has weight {v}",
                    m.letter()
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("fusion weights sum to {sum}, not 1")));
        }
        Ok(FusionWeights { w, active })
    }

    /// Equal weight on every active modality.
    pub fn uniform(active: ModalitySet) -> Self {
        let k = active.len() as f64;
        let w = std::array::from_fn(|i| if active.0[i] { 1.0 / k } else { 0.0 });
        FusionWeights { w, active }
    }

    /// `w_v` on video, the rest split evenly over the other active
    /// modalities.
    pub fn fixed_video(w_v: f64, active: ModalitySet) -> Result<Self> {
        let others = active.len() - 1;
        if others == 0 {
            return Self::masked([1.0, 0.0, 0.0, 0.0], active);
        }
        let rest = (1.0 - w_v) / others as f64;
        let w = std::array::from_fn(|i| match i {
            0 => w_v,
            _ if active.0[i] => rest,
            _ => 0.0,
        });
        Self::masked(w, active)
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.w[m.index()]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine of a zero-norm vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-class similarities of one representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSims {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    /// `pos - neg`.
    pub sim: Vec<f64>,
}

/// Cosine against every `c_pos` and `c_neg` row and their difference.
pub fn pn_similarity(m: &[f64], pn: &PNTextEmbeddings) -> Result<ClassSims> {
    if pn.pos.shape() != pn.neg.shape() {
        return Err(Error::shape(
            "PN embeddings",
            format!("{:?}", pn.pos.shape()),
            format!("{:?}", pn.neg.shape()),
        ));
    }
    let mut out = ClassSims {
        pos: Vec::with_capacity(pn.pos.rows),
        neg: Vec::with_capacity(pn.pos.rows),
        sim: Vec::with_capacity(pn.pos.rows),
    };
    for i in 0..pn.pos.rows {
        let p = cosine(m, pn.pos.row(i))?;
        let n = cosine(m, pn.neg.row(i))?;
        out.pos.push(p);
        out.neg.push(n);
        out.sim.push(p - n);
    }
    Ok(out)
}

/// Similarities of every modality (inactive ones absent) and of the fused
/// representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub modalities: [Option<ClassSims>; 4],
    pub fused: Option<ClassSims>,
}

impl SimilarityTable {
    pub fn build(embs: [&[f64]; 4], pn: &PNTextEmbeddings, active: ModalitySet) -> Result<Self> {
        let mut modalities: [Option<ClassSims>; 4] = Default::default();
        for m in active.active() {
            modalities[m.index()] = Some(pn_similarity(embs[m.index()], pn)?);
        }
        Ok(SimilarityTable {
            modalities,
            fused: None,
        })
    }

    pub fn active(&self) -> ModalitySet {
        ModalitySet(std::array::from_fn(|i| self.modalities[i].is_some()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Softmax over each active modality's best class similarity.
pub fn modality_weights(table: &SimilarityTable) -> Result<FusionWeights> {
    let active = table.active();
    let mut maxima = [f64::NEG_INFINITY; 4];
    for m in active.active() {
        let s = table.modalities[m.index()].as_ref().expect("active");
        if s.sim.is_empty() {
            return Err(Error::Invalid("empty similarity row".into()));
        }
        if s.sim.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("similarity of modality {}", m.letter())));
        }
        maxima[m.index()] = s.sim.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(weights_from_maxima(maxima, active))
}

/// Softmax of `maxima` restricted to `active`.
pub fn weights_from_maxima(maxima: [f64; 4], active: ModalitySet) -> FusionWeights {
    let top = active
        .active()
        .map(|m| maxima[m.index()])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; 4];
    let mut z = 0.0;
    for m in active.active() {
        w[m.index()] = (maxima[m.index()] - top).exp();
        z += w[m.index()];
    }
    for v in &mut w {
        *v /= z;
    }
    FusionWeights { w, active }
}

/// `Σ_m w_m · emb_m` over active modalities.
pub fn fuse(embs: [&[f64]; 4], w: &FusionWeights) -> Result<Vec<f64>> {
    let e = embs[0].len();
    let mut out = vec![0.0; e];
    for m in w.active.active() {
        let x = embs[m.index()];
        if x.len() != e {
            return Err(Error::shape(format!("modality {}", m.letter()), e, x.len()));
        }
        for (o, v) in out.iter_mut().zip(x) {
            *o += w.get(m) * v;
        }
    }
    Ok(out)
}

/// Which similarity drives classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// `sim_pos - sim_neg`.
    #[default]
    PnDiff,
    /// `sim_pos` alone.
    PosOnly,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn_diff" => Ok(SimilarityMode::PnDiff),
            "pos_only" => Ok(SimilarityMode::PosOnly),
            _ => Err(Error::Config(format!("unknown similarity mode {s:?}"))),
        }
    }
}

impl ClassSims {
    pub fn scores(&self, mode: SimilarityMode) -> &[f64] {
        match mode {
            SimilarityMode::PnDiff => &self.sim,
            SimilarityMode::PosOnly => &self.pos,
        }
    }
}

/// `softmax(scores / tau)` and its argmax (lowest index on ties).
pub fn classify_scores(scores: &[f64], tau: f64) -> Result<(Vec<f64>, usize)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("no classes to score".into()));
    }
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scores.iter().map(|s| ((s - top) / tau).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok((probs, best))
}

pub fn classify(rep: &[f64], pn: &PNTextEmbeddings, tau: f64) -> Result<(Vec<f64>, usize)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    classify_scores(&pn_similarity(rep, pn)?.sim, tau)
}

/// How fusion weights are formed during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    /// Per-sample softmax of the modality maxima.
    Adaptive {
        /// Let gradients flow through the weights.
        #[serde(default)]
        differentiable: bool,
        /// Replace per-sample weights by their batch mean.
        #[serde(default)]
        batch_mean: bool,
    },
    /// `w_v` on video, the remainder split evenly over the other modalities.
    Fixed { w_v: f64 },
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Adaptive {
            differentiable: false,
            batch_mean: false,
        }
    }
}

impl Weighting {
    pub fn validate(&self) -> Result<()> {
        if let Weighting::Fixed { w_v } = self {
            if !(*w_v > 0.0 && *w_v < 1.0) {
                return Err(Error::Config(format!("fixed w_v must be in (0, 1), got {w_v}")));
            }
        }
        Ok(())
    }

    /// Parses `adaptive` or `fixed:<w_v>`.
    pub fn parse(s: &str) -> Result<Self> {
        let w = match s.trim() {
            "adaptive" => Weighting::default(),
            other => match other.strip_prefix("fixed:") {
                Some(v) => Weighting::Fixed {
                    w_v: v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad weighting {s:?}")))?,
                },
                None => return Err(Error::Config(format!("bad weighting {s:?}"))),
            },
        };
        w.validate()?;
        Ok(w)
    }

    pub fn label(&self) -> String {
        match self {
            Weighting::Adaptive { .. } => "adaptive".into(),
            Weighting::Fixed { w_v } => format!("fixed:{w_v}"),
        }
    }
}

/// Batched fusion built on a tape.
pub struct FusionGraph {
    /// Per-modality class scores `[B × N]`; `None` for inactive modalities.
    pub scores: [Option<Var>; 4],
    /// Fused representation `[B × e]`.
    pub fused: Var,
    /// Scores of the fused representation `[B × N]`.
    pub fused_scores: Var,
    /// Weights used for each sample (values only).
    pub weights: Vec<FusionWeights>,
    /// Weight columns `[B × 1]` as they enter the graph.
    pub weight_vars: [Option<Var>; 4],
}

/// Cosine scores of `reps: [B × e]` against the class prompts.
pub fn tape_scores(tape: &mut Tape, reps: Var, pos: Var, neg: Var, mode: SimilarityMode) -> Var {
    let r = tape.normalize_rows(reps);
    let p = tape.normalize_rows(pos);
    let sp = tape.matmul(r, p, true);
    match mode {
        SimilarityMode::PosOnly => sp,
        SimilarityMode::PnDiff => {
            let n = tape.normalize_rows(neg);
            let sn = tape.matmul(r, n, true);
            tape.sub(sp, sn)
        }
    }
}

fn check_nonzero_rows(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let m = tape.value(v);
    for r in 0..m.rows {
        if norm(m.row(r)) == 0.0 {
            return Err(Error::Invalid(format!("{what} row {r} has zero norm")));
        }
        if !m.row(r).iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("{what} row {r}")));
        }
    }
    Ok(())
}

impl FusionGraph {
    /// Scores every active modality, forms the weights and scores the fused
    /// representation.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        tape: &mut Tape,
        embs: [Option<Var>; 4],
        pos: Var,
        neg: Var,
        active: ModalitySet,
        weighting: Weighting,
        mode: SimilarityMode,
    ) -> Result<Self> {
        check_nonzero_rows(tape, pos, "positive prompt")?;
        check_nonzero_rows(tape, neg, "negative prompt")?;
        let mut emb = [None; 4];
        for m in active.active() {
            emb[m.index()] = Some(embs[m.index()].ok_or_else(|| {
                Error::Invalid(format!("active modality {} has no embedding", m.letter()))
            })?);
        }
        let b = tape.value(emb[0].expect("video is always active")).rows;
        let mut scores: [Option<Var>; 4] = [None; 4];
        for m in active.active() {
            let e = emb[m.index()].expect("active");
            check_nonzero_rows(tape, e, &format!("modality {}", m.letter()))?;
            scores[m.index()] = Some(tape_scores(tape, e, pos, neg, mode));
        }

        let mut weight_vars: [Option<Var>; 4] = [None; 4];
        let weights: Vec<FusionWeights> = match weighting {
            Weighting::Fixed { w_v } => {
                let w = FusionWeights::fixed_video(w_v, active)?;
                for m in active.active() {
                    weight_vars[m.index()] = Some(tape.constant(Mat::from_vec(b, 1, vec![w.get(m); b])));
                }
                vec![w; b]
            }
            Weighting::Adaptive {
                differentiable,
                batch_mean,
            } => {
                let idx: Vec<Modality> = active.active().collect();
                let maxima: Vec<Var> = idx
                    .iter()
                    .map(|m| tape.row_max(scores[m.index()].expect("active")))
                    .collect();
                let cat = tape.concat_cols(maxima);
                let soft = tape.softmax_rows(cat);
                let mut per_sample: Vec<FusionWeights> = (0..b)
                    .map(|r| {
                        let row = tape.value(soft).row(r);
                        let mut w = [0.0; 4];
                        for (k, m) in idx.iter().enumerate() {
                            w[m.index()] = row[k];
                        }
                        FusionWeights { w, active }
                    })
                    .collect();
                if batch_mean {
                    let mut mean = [0.0; 4];
                    for w in &per_sample {
                        for (a, v) in mean.iter_mut().zip(w.w) {
                            *a += v / b as f64;
                        }
                    }
                    per_sample = vec![FusionWeights { w: mean, active }; b];
                }
                for (k, m) in idx.iter().enumerate() {
                    weight_vars[m.index()] = Some(if differentiable && !batch_mean {
                        tape.slice_cols(soft, k, 1)
                    } else {
                        let col = per_sample.iter().map(|w| w.get(*m)).collect();
                        tape.constant(Mat::from_vec(b, 1, col))
                    });
                }
                per_sample
            }
        };

        let mut fused: Option<Var> = None;
        for m in active.active() {
            let term = tape.mul_rows_by(emb[m.index()].expect("active"), weight_vars[m.index()].expect("active"));
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let fused = fused.expect("at least one modality");
        check_nonzero_rows(tape, fused, "fused representation")?;
        let fused_scores = tape_scores(tape, fused, pos, neg, mode);
        Ok(FusionGraph {
            scores,
            fused,
            fused_scores,
            weights,
            weight_vars,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pn(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PNTextEmbeddings {
        PNTextEmbeddings {
            pos: Mat::from_rows(&pos),
            neg: Mat::from_rows(&neg),
        }
    }

    #[test]
    fn hand_cosine_example() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = pn_similarity(&[1.0, 0.0], &pn(vec![vec![h, h]], vec![vec![0.0, 1.0]])).unwrap();
        assert!((s.sim[0] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((s.sim[0] - 0.7071).abs() < 5e-5);
    }

    #[test]
    fn identical_and_orthogonal() {
        let s = pn_similarity(&[0.0, 2.0], &pn(vec![vec![0.0, 1.0]], vec![vec![3.0, 0.0]])).unwrap();
        assert_eq!(s.sim, vec![1.0]);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(pn_similarity(&[0.0, 0.0], &pn(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]])).is_err());
        assert!(pn_similarity(&[1.0, 0.0], &pn(vec![vec![0.0, 0.0]], vec![vec![0.0, 1.0]])).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = weights_from_maxima([0.3; 4], ModalitySet::FULL);
        assert!(w.w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let w = weights_from_maxima([0.2, 0.1, 0.1, 0.1], ModalitySet::FULL);
        // e^0.2 / (e^0.2 + 3 e^0.1) evaluated separately.
        assert!((w.w[0] - 0.269_214_349_446_310_23).abs() < 1e-12, "{}", w.w[0]);
    }

    #[test]
    fn simplex_validation() {
        assert!(FusionWeights::new([1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(FusionWeights::new([0.4, 0.2, 0.2, 0.2]).is_ok());
        assert!(FusionWeights::new([0.4, 0.2, 0.2, 0.3]).is_err());
        let v_only = ModalitySet::parse("v").unwrap();
        assert!(FusionWeights::masked([1.0, 0.0, 0.0, 0.0], v_only).is_ok());
        assert!(FusionWeights::masked([0.5, 0.5, 0.0, 0.0], v_only).is_err());
        let w = FusionWeights::fixed_video(0.4, ModalitySet::FULL).unwrap();
        assert!((w.w[3] - 0.2).abs() < 1e-15);
        let vf = ModalitySet::parse("vf").unwrap();
        assert_eq!(FusionWeights::fixed_video(0.3, vf).unwrap().w, [0.3, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn classify_examples() {
        let (p, k) = classify_scores(&[0.5; 7], 0.01).unwrap();
        assert_eq!(k, 0);
        assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        let mut s = vec![0.0; 7];
        s[0] = 0.05;
        let (p, k) = classify_scores(&s, 0.01).unwrap();
        assert_eq!(k, 0);
        assert!((p[0] - 1.0 / (1.0 + 6.0 * (-5.0f64).exp())).abs() < 1e-12);
        assert!(classify_scores(&s, 0.0).is_err());
    }

    #[test]
    fn modality_sets_parse() {
        assert_eq!(ModalitySet::parse("{v,p,l}").unwrap().to_string(), "vpl");
        assert!(ModalitySet::parse("pl").is_err());
        assert!(ModalitySet::parse("vx").is_err());
        assert_eq!(Weighting::parse("fixed:0.3").unwrap(), Weighting::Fixed { w_v: 0.3 });
        assert!(Weighting::parse("fixed:1.0").is_err());
    }
}
