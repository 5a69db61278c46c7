//! Scalar re-derivations of the fusion maths, written with plain loops and
//! no calls into the crate.

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `(pos, neg, pos - neg)` for every class row.
pub fn pn(m: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = Vec::new();
    let mut n = Vec::new();
    let mut d = Vec::new();
    for k in 0..pos.len() {
        let a = cos(m, &pos[k]);
        let b = cos(m, &neg[k]);
        p.push(a);
        n.push(b);
        d.push(a - b);
    }
    (p, n, d)
}

/// Softmax over the per-modality best class similarity.
pub fn weights(sims: &[Vec<f64>]) -> Vec<f64> {
    let mut e = Vec::new();
    for s in sims {
        let mut best = s[0];
        for &v in s {
            if v > best {
                best = v;
            }
        }
        e.push(best.exp());
    }
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn fuse(embs: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; embs[0].len()];
    for (m, e) in embs.iter().enumerate() {
        for i in 0..e.len() {
            out[i] += w[m] * e[i];
        }
    }
    out
}

/// Probabilities `exp(s/τ) / Σ exp(s/τ)` and the first maximising index.
pub fn classify(scores: &[f64], tau: f64) -> (Vec<f64>, usize) {
    let e: Vec<f64> = scores.iter().map(|s| (s / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (e.iter().map(|v| v / z).collect(), best)
}
