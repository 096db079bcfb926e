//! Central finite-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation `h` in `(f(θ+h) − f(θ−h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// At most this many coordinates are sampled per parameter tensor.
    pub max_coords_per_param: usize,
    /// Relative error is `|a − n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-3,
            max_coords_per_param: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordinateCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks several scalar functions of the same parameters at once.
///
/// `analytic[o][p]` is the gradient of output `o` w.r.t. parameter `p`
/// (flattened, same order as the store). Each perturbation evaluates `f`
/// once and compares every output. Frozen parameters are not sampled.
/// Perturbed evaluations that fail or return non-finite values are counted
/// as skipped.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    labels: &[&str],
    analytic: &[Vec<Vec<f64>>],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&ParamStore) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports: Vec<GradCheckReport> = labels
        .iter()
        .map(|l| GradCheckReport {
            label: l.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
            passed: true,
        })
        .collect();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.get(id).tensor.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = store.get(id).tensor.data()[idx];
            store.get_mut(id).tensor.data_mut()[idx] = orig + opts.step;
            let plus = f(store);
            store.get_mut(id).tensor.data_mut()[idx] = orig - opts.step;
            let minus = f(store);
            store.get_mut(id).tensor.data_mut()[idx] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                _ => {
                    reports.iter_mut().for_each(|r| r.skipped += 1);
                    continue;
                }
            };
            for (o, rep) in reports.iter_mut().enumerate() {
                if !plus[o].is_finite() || !minus[o].is_finite() {
                    rep.skipped += 1;
                    continue;
                }
                let numeric = (plus[o] - minus[o]) / (2.0 * opts.step);
                let a = analytic[o][id.index()][idx];
                let rel = relative_error(a, numeric, opts.abs_floor);
                rep.checked += 1;
                if rep.worst.is_none() || rel > rep.max_rel_err {
                    rep.max_rel_err = rel;
                    rep.worst = Some(CoordinateCheck {
                        param: store.get(id).name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
    }
    for r in &mut reports {
        r.passed = r.max_rel_err < opts.tol;
    }
    Ok(reports)
}

/// Single-output convenience wrapper over [`finite_diff_check`].
pub fn check_scalar<F>(
    store: &mut ParamStore,
    analytic: Vec<Vec<f64>>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut r = finite_diff_check(store, &["f"], &[analytic], |s| f(s).map(|v| vec![v]), opts)?;
    Ok(r.remove(0))
}

/// Snapshot of every parameter gradient currently held by the store.
pub fn collect_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, p)| p.grad.clone()).collect()
}
