//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;

use super::{ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

fn evaluate<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let root = f(&mut tape)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Shape("loss must be a scalar".into()));
    }
    if !v.item().is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(v.item())
}

/// Below this magnitude a gradient is judged by absolute error. Central
/// differences of an f64 loss carry roundoff near `ulp(L) / eps`, about
/// 1e-11 at `eps = 1e-4`, so structurally zero gradients (a bias shifting
/// every softmax logit equally) would otherwise score as large relative
/// errors.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences on `samples`
/// randomly chosen coordinates (all of them when `samples` covers the store)
/// and returns the largest `|g_ad − g_fd| / max(DENOM_FLOOR, |g_ad| + |g_fd|)`.
/// Parameter values are restored before returning.
pub fn grad_check<F>(store: &mut ParameterStore, eps: f64, samples: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let root = f(&mut tape)?;
        if !tape.value(root).item().is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        tape.backward(root)?
    };
    let coords: Vec<(ParamId, usize)> =
        store.ids().flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i))).collect();
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut rng = rng::stream(seed, streams::GRADCHECK, 0);
        let mut picked = sample(&mut rng, coords.len(), samples).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut worst: f64 = 0.0;
    for c in chosen {
        let (id, i) = coords[c];
        let ga = analytic.get(id).map_or(0.0, |g| g.data()[i]);
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let plus = evaluate(store, &f);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let minus = evaluate(store, &f);
        store.value_mut(id).data_mut()[i] = orig;
        let gf = (plus? - minus?) / (2.0 * eps);
        let rel = (ga - gf).abs() / (ga.abs() + gf.abs()).max(DENOM_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
