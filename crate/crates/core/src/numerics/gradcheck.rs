//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::params::{GradBuffer, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name (or `"x"`) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn update(&mut self, analytic: f64, numeric: f64, name: &str, idx: usize) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.coordinates += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), idx));
        }
    }

    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coordinates: 0,
        }
    }
}

fn central<F: FnMut() -> f64>(mut eval_plus: F, minus: f64, h: f64) -> Result<f64> {
    let plus = eval_plus();
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Checks `analytic` against central differences of `loss` w.r.t. every
/// parameter in `store`. With `max_per_param = Some(k)`, at most `k`
/// coordinates of each parameter are sampled (seeded by `seed`).
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    analytic: &GradBuffer,
    mut loss: F,
    h: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be > 0, got {h}")));
    }
    if !loss(store).is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::empty();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic.dense(store, id);
        let name = store.get(id).name.clone();
        for idx in coords {
            let orig = store.value(id).as_slice().expect("contiguous")[idx];
            store.value_mut(id).as_slice_mut().expect("contiguous")[idx] = orig - h;
            let minus = loss(store);
            store.value_mut(id).as_slice_mut().expect("contiguous")[idx] = orig + h;
            let numeric = central(|| loss(store), minus, h);
            store.value_mut(id).as_slice_mut().expect("contiguous")[idx] = orig;
            let numeric = numeric?;
            report.update(grad.as_slice().expect("contiguous")[idx], numeric, &name, idx);
        }
    }
    Ok(report)
}

/// Same check for a plain function of a vector.
pub fn check_function<F>(x: &[f64], analytic: &[f64], mut f: F, h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be > 0, got {h}")));
    }
    assert_eq!(x.len(), analytic.len(), "check_function: length mismatch");
    let mut report = GradCheck::empty();
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] - h;
        let minus = f(&work);
        work[i] = x[i] + h;
        let numeric = central(|| f(&work), minus, h)?;
        work[i] = x[i];
        report.update(analytic[i], numeric, "x", i);
    }
    Ok(report)
}
