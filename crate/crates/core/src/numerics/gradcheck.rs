use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParamStore, Result, Tape, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Checks the gradient of the scalar built by `f` against central differences
/// on `samples` coordinates drawn uniformly (without replacement) from all
/// parameters in `store`. Every coordinate is checked when `samples` covers
/// them all. Parameter values are restored afterwards.
pub fn finite_diff_check<F>(
    f: F,
    store: &mut ParamStore,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    store.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward_into(loss, store)?;

    let mut coords = Vec::new();
    for id in store.ids() {
        for i in 0..store.get(id).value.len() {
            coords.push((id, i));
        }
    }
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, coords.len(), samples).into_vec()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: chosen.len(),
        worst: None,
    };
    for c in chosen {
        let (id, i) = coords[c];
        let analytic = store.get(id).grad.as_ref().expect("backward ran")[i];
        let original = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = original + h;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[i] = original - h;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let d = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);

        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(vec![3.0]));
        let id = store.find("x").unwrap();
        let report = finite_diff_check(
            move |tape, s| tape.param(s, id).square()?.sum(),
            &mut store,
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 1);
        assert!(report.max_rel_error < 1e-9);
        assert_eq!(store.flat_values(), vec![3.0]);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![1.0]));
        let r = finite_diff_check(move |t, s| t.param(s, id).sum(), &mut store, 0.1, 1, 0);
        assert!(matches!(r, Err(NumericsError::InvalidArgument(_))));
    }
}
