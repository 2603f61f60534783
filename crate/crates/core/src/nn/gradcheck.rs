//! Central-difference gradient checking for 64-bit instantiations.
//!
//! The relative error of an analytic/numeric pair is
//! `|a − n| / max(|a|, |n|, FLOOR)`. At step `1e-5` a central difference
//! carries round-off near `1e-9`, so gradients much smaller than the floor
//! are compared in absolute terms.

use crate::image::FeatureMap;
use crate::nn::params::{Grads, ParamId, ParamStore};
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn dot_map(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` with respect to one scalar parameter.
pub fn numeric_param_grad(
    store: &ParamStore<f64>,
    (id, k): (ParamId, usize),
    step: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut s = store.clone();
    let orig = s.get(id)[k];
    s.get_mut(id)[k] = orig + step;
    let fp = f(&s);
    s.get_mut(id)[k] = orig - step;
    let fm = f(&s);
    (fp - fm) / (2.0 * step)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checks `count` parameters drawn uniformly (without replacement when
/// possible) from the whole store. `count >= numel` checks everything.
pub fn sampled_param_check(
    store: &ParamStore<f64>,
    grads: &Grads<f64>,
    count: usize,
    rng: &mut Rng,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let numel = store.numel();
    let picks: Vec<usize> = if count >= numel {
        (0..numel).collect()
    } else {
        let mut all: Vec<usize> = (0..numel).collect();
        for i in 0..count {
            let j = i + rng.below(numel - i);
            all.swap(i, j);
        }
        all.truncate(count);
        all
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in picks {
        let loc = store.flat_locate(flat);
        let numeric = numeric_param_grad(store, loc, FD_STEP, &mut f);
        let analytic = grads.flat(loc);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(loc.0).to_owned(), loc.1, analytic, numeric));
        }
    }
    report
}

/// Asserts every parameter gradient matches its central difference.
pub fn check_param_grads(
    store: &ParamStore<f64>,
    grads: &Grads<f64>,
    f: impl FnMut(&ParamStore<f64>) -> f64,
    tol: f64,
) {
    let r = sampled_param_check(store, grads, usize::MAX, &mut Rng::new(0), f);
    assert!(r.max_rel_error < tol, "gradient check failed: {r:?}");
}

/// Asserts an input gradient matches central differences of `f`.
pub fn check_input_grad(
    x: &FeatureMap<f64>,
    dx: &FeatureMap<f64>,
    mut f: impl FnMut(&FeatureMap<f64>) -> f64,
    tol: f64,
) {
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        let err = relative_error(dx.data()[i], numeric);
        assert!(
            err < tol,
            "input grad {i}: analytic {} numeric {numeric}",
            dx.data()[i]
        );
    }
}
