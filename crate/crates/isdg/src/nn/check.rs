//! Central finite-difference gradient checking against the tape.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::state::ModelState;
use crate::nn::tensor::Real;

/// Outcome of a gradient check: the worst relative error and where it was
/// found.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub group: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
    pub coords_checked: usize,
}

/// Distinct coordinate sample, all coordinates when the group is small.
fn sample_coords(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Compares reverse-mode gradients with central finite differences
/// `(f(p+ε) − f(p−ε)) / 2ε`, subsampling `coords_per_group` coordinates of
/// each parameter group.
///
/// The loss closure is called with `accumulate = true` once to populate the
/// analytic gradients, and with `accumulate = false` for every perturbed
/// evaluation. It must be deterministic.
pub fn finite_diff_check<F>(
    state: &mut ModelState<f64>,
    mut loss: F,
    eps: f64,
    coords_per_group: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&mut ModelState<f64>, bool) -> Result<f64>,
{
    state.zero_grads();
    let base = loss(state, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss = {base}")));
    }
    let analytic: Vec<Vec<f64>> = state
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        group: String::new(),
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        loss: base,
        coords_checked: 0,
    };

    for gid in 0..state.len() {
        let len = state.value(gid).len();
        let coords = sample_coords(len, coords_per_group, &mut rng);
        for &k in &coords {
            let orig = state.value(gid).data()[k];
            state.value_mut(gid).data_mut()[k] = orig + eps;
            let plus = loss(state, false)?;
            state.value_mut(gid).data_mut()[k] = orig - eps;
            let minus = loss(state, false)?;
            state.value_mut(gid).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbed loss at {}[{k}]",
                    state.name(gid)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[gid][k];
            report.coords_checked += 1;
            // Coordinates whose true gradient is zero see only differencing
            // noise; skip the ratio there.
            if a.abs() < 1e-6 && numeric.abs() < 1e-6 {
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs());
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.group = state.name(gid).to_string();
                report.coord = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
