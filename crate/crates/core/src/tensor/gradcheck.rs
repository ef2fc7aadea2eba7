use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of
    /// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` at the maximum.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of a scalar function of `store` against
/// central differences with step `eps`.
///
/// `sample` limits the check to that many coordinates drawn uniformly
/// (seeded) from all parameter scalars; `None` checks every coordinate.
/// `f` must build its graph in evaluation mode and be deterministic.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, sample: Option<(usize, u64)>, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base = g.value(loss).item();
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = store
        .ids()
        .map(|id| g.bound_param(id).and_then(|v| g.grad(v)).map(|t| t.data().to_vec()))
        .collect();
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item())
    };
    let again = eval(store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (id, i) in coords(store, sample) {
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        report.coords_checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.name(id).to_string(), i, a, numeric));
        }
    }
    Ok(report)
}

fn coords(store: &ParamStore, sample: Option<(usize, u64)>) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.spec(id).numel()).map(move |i| (id, i)))
        .collect();
    match sample {
        Some((k, seed)) if k < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    }
}
