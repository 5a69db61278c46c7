mod common;

use common::oracle;
use pnfer_core::encoders::PNTextEmbeddings;
use pnfer_core::fusion::{
    classify, classify_scores, fuse, modality_weights, pn_similarity, FusionGraph, FusionWeights, ModalitySet,
    SimilarityMode, SimilarityTable, Weighting,
};
use pnfer_core::netcore::{Mat, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vecs(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn mat(rows: &[Vec<f64>]) -> Mat {
    Mat::from_vec(rows.len(), rows[0].len(), rows.concat())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn fusion_pipeline_matches_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.random_range(2..6);
        let e = rng.random_range(2..7);
        let tau = rng.random_range(0.05..1.0);
        let pos = vecs(&mut rng, n, e);
        let neg = vecs(&mut rng, n, e);
        let embs = vecs(&mut rng, 4, e);
        let pnm = PNTextEmbeddings { pos: mat(&pos), neg: mat(&neg) };

        let mut sims = Vec::new();
        for m in &embs {
            let got = pn_similarity(m, &pnm).unwrap();
            let (p, ng, d) = oracle::pn(m, &pos, &neg);
            assert!(close(&got.pos, &p, 1e-12) && close(&got.neg, &ng, 1e-12) && close(&got.sim, &d, 1e-12));
            sims.push(d);
        }
        let refs = [&embs[0][..], &embs[1][..], &embs[2][..], &embs[3][..]];
        let table = SimilarityTable::build(refs, &pnm, ModalitySet::FULL).unwrap();
        let w = modality_weights(&table).unwrap();
        let w_ref = oracle::weights(&sims);
        assert!(close(&w.w, &w_ref, 1e-9), "{:?} vs {w_ref:?}", w.w);

        let fused = fuse(refs, &w).unwrap();
        let fused_ref = oracle::fuse(&embs, &w_ref);
        assert!(close(&fused, &fused_ref, 1e-9));

        let (probs, k) = classify(&fused, &pnm, tau).unwrap();
        let (_, _, d) = oracle::pn(&fused_ref, &pos, &neg);
        let (probs_ref, k_ref) = oracle::classify(&d, tau);
        assert!(close(&probs, &probs_ref, 1e-9));
        assert_eq!(k, k_ref);
    }
}

#[test]
fn argmax_ignores_score_shifts_and_vector_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let scores: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let (p1, k1) = classify_scores(&scores, 0.01).unwrap();
        let (p2, k2) = classify_scores(&shifted, 0.01).unwrap();
        assert_eq!(k1, k2);
        assert!(close(&p1, &p2, 1e-9));

        let pos = vecs(&mut rng, 4, 6);
        let neg = vecs(&mut rng, 4, 6);
        let pnm = PNTextEmbeddings { pos: mat(&pos), neg: mat(&neg) };
        let rep = vecs(&mut rng, 1, 6).remove(0);
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = rep.iter().map(|v| v * c).collect();
        assert_eq!(classify(&rep, &pnm, 0.1).unwrap().1, classify(&scaled, &pnm, 0.1).unwrap().1);
    }
}

#[test]
fn equal_inputs_fuse_to_themselves() {
    let u = [0.3, -1.2, 2.0];
    let w = FusionWeights::new([0.1, 0.2, 0.3, 0.4]).unwrap();
    let f = fuse([&u, &u, &u, &u], &w).unwrap();
    assert!(close(&f, &u, 1e-12));
}

#[test]
fn tape_graph_agrees_with_per_sample_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (b, n, e) = (6, 5, 4);
    let pos = vecs(&mut rng, n, e);
    let neg = vecs(&mut rng, n, e);
    let pnm = PNTextEmbeddings { pos: mat(&pos), neg: mat(&neg) };
    let embs: Vec<Vec<Vec<f64>>> = (0..4).map(|_| vecs(&mut rng, b, e)).collect();
    for active in ["vplf", "vp", "v"] {
        let set = ModalitySet::parse(active).unwrap();
        let mut tape = Tape::no_grad();
        let vars: [_; 4] = std::array::from_fn(|m| set.0[m].then(|| tape.constant(mat(&embs[m]))));
        let pv = tape.constant(pnm.pos.clone());
        let nv = tape.constant(pnm.neg.clone());
        let g = FusionGraph::build(&mut tape, vars, pv, nv, set, Weighting::default(), SimilarityMode::PnDiff).unwrap();
        let fused = tape.value(g.fused).clone();
        for i in 0..b {
            let sample: Vec<Vec<f64>> = (0..4).filter(|&m| set.0[m]).map(|m| embs[m][i].clone()).collect();
            let sims: Vec<Vec<f64>> = sample.iter().map(|x| oracle::pn(x, &pos, &neg).2).collect();
            let w = oracle::weights(&sims);
            let want = oracle::fuse(&sample, &w);
            assert!(close(fused.row(i), &want, 1e-9), "{active} sample {i}");
            let got_w: Vec<f64> = (0..4).filter(|&m| set.0[m]).map(|m| g.weights[i].w[m]).collect();
            assert!(close(&got_w, &w, 1e-9));
        }
    }
}
