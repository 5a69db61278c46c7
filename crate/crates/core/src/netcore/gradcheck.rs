//! Central-difference gradient oracle.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::mat::Mat;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of `|g_fd - g| / max(1, |g_fd|, |g|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Frozen parameters that were handed an analytic gradient. Must be empty.
    pub frozen_with_gradient: Vec<String>,
}

/// Compares the analytic gradient returned by `f` against central
/// differences on up to `coords_per_param` sampled coordinates of every
/// trainable tensor.
pub fn grad_check<F>(
    store: &ParamStore,
    f: F,
    epsilon: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, HashMap<ParamId, Mat>)>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let (base, grads) = f(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let frozen_with_gradient = grads
        .keys()
        .filter(|id| !store.get(**id).trainable)
        .map(|id| store.get(*id).name.clone())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (id, t) in store.iter() {
        if !t.trainable {
            continue;
        }
        let n = t.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let orig = t.values[c];
            work.get_mut(id).values[c] = orig + epsilon;
            let (fp, _) = f(&work)?;
            work.get_mut(id).values[c] = orig - epsilon;
            let (fm, _) = f(&work)?;
            work.get_mut(id).values[c] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("grad_check probe of {}", t.name)));
            }
            let fd = (fp - fm) / (2.0 * epsilon);
            let an = grads.get(&id).map_or(0.0, |g| g.data[c]);
            let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((t.name.clone(), c));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        worst,
        frozen_with_gradient,
    })
}

/// Runs `build` on a fresh tape and returns the scalar loss with the
/// gradients of every trainable parameter.
pub fn tape_objective<B>(store: &ParamStore, build: B) -> Result<(f64, HashMap<ParamId, Mat>)>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let value = tape.value(loss).data[0];
    let grads = tape.backward(loss).into_params();
    Ok((value, grads))
}

/// [`grad_check`] over an objective expressed as a tape builder.
pub fn grad_check_tape<B>(
    store: &ParamStore,
    build: B,
    epsilon: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check(
        store,
        |s| tape_objective(s, &build),
        epsilon,
        coords_per_param,
        seed,
    )
}
