//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter name, flat index, analytic, numeric) at the worst coordinate
    pub worst: Option<(String, usize, f64, f64)>,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut t = Tape::new(store);
    let loss = f(&mut t)?;
    let v = t.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("grad_check objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences at up to
/// `max_coords` sampled coordinates per parameter. The error at each
/// coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// Checked parameters are made trainable for the duration of the check so
/// that the tape materializes their gradients.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let flags: Vec<bool> = params.iter().map(|&id| store.get(id).trainable()).collect();
    for &id in params {
        store.set_trainable(id, true);
    }
    let result = check_inner(store, params, eps, max_coords, &f);
    for (&id, &flag) in params.iter().zip(&flags) {
        store.set_trainable(id, flag);
    }
    result
}

fn check_inner<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, max_coords: usize, f: &F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic: Vec<Option<crate::nncore::Mat>> = {
        let mut t = Tape::new(store);
        let loss = f(&mut t)?;
        let v = t.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("grad_check objective evaluated to {v}")));
        }
        let g = t.backward(loss);
        params.iter().map(|&id| g.param(id).cloned()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (pi, &id) in params.iter().enumerate() {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        for c in coords {
            let orig = store.value(id).as_slice()[c];
            store.values_mut(id)[c] = orig + eps;
            let plus = eval(store, f);
            store.values_mut(id)[c] = orig - eps;
            let minus = eval(store, f);
            store.values_mut(id)[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.as_slice()[c]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name().to_string(), c, a, numeric));
            }
        }
    }
    Ok(report)
}
