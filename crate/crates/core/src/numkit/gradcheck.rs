//! Central-difference gradient checking.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ParamId, ParamSet, Tape, Var};
use crate::error::Result;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error; NaN if any entry is NaN.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m: f64, e| {
            if e.rel_error.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(e.rel_error)
            }
        })
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| {
            let (x, y) = (nan_high(a.rel_error), nan_high(b.rel_error));
            x.total_cmp(&y)
        })
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error <= tol)
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

fn nan_high(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}

/// Finite-difference step for a coordinate with value `x`.
pub fn step_size(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape's gradient of `f` against central differences at each
/// `(param, flat index)` coordinate. `f` must be deterministic. Parameter
/// values are restored before returning.
pub fn grad_check<F>(
    params: &mut ParamSet,
    coords: &[(ParamId, usize)],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.gradients(loss)?;
    drop(tape);

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    for &(id, index) in coords {
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
        let x = params.value(id).data()[index];
        let h = step_size(x);
        params.value_mut(id).data_mut()[index] = x + h;
        let plus = eval(params);
        params.value_mut(id).data_mut()[index] = x - h;
        let minus = eval(params);
        params.value_mut(id).data_mut()[index] = x;
        // Errors at a perturbed point (e.g. a non-finite intermediate) are
        // reported as NaN rather than aborting the whole check.
        let numeric = match (plus, minus) {
            (Ok(p), Ok(m)) => (p - m) / (2.0 * h),
            _ => f64::NAN,
        };
        report.entries.push(GradCheckEntry {
            param: params.get(id).name().to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}

/// Every coordinate of the given parameters.
pub fn all_coords(params: &ParamSet, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..params.value(id).numel()).map(move |i| (id, i)))
        .collect()
}

/// `n` coordinates sampled uniformly without replacement across the given
/// parameters.
pub fn sample_coords<R: Rng + ?Sized>(
    params: &ParamSet,
    ids: &[ParamId],
    n: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let mut all = all_coords(params, ids);
    all.shuffle(rng);
    all.truncate(n);
    all
}
