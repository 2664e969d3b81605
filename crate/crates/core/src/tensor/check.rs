//! Finite-difference gradient verification.

use super::{Real, Tape, Val};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradFailure {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub failures: Vec<GradFailure>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with a floor so that finite-difference noise around a
/// true zero gradient does not register as failure.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients of `build` against central finite
/// differences of width `step` at every entry of every parameter.
///
/// `build` must construct a scalar loss from leaves created in the order
/// of `params`. The finite-difference side re-runs the forward pass on a
/// fresh tape, so it is independent of the backward rules it checks.
pub fn grad_check<T, F>(
    build: F,
    params: &[(Vec<T>, Vec<usize>)],
    step: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Val]) -> Result<Val>,
{
    let eval = |data: &[Vec<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vals = Vec::with_capacity(params.len());
        for (p, (_, shape)) in data.iter().zip(params) {
            vals.push(tape.leaf(p.clone(), shape.clone())?);
        }
        let loss = build(&mut tape, &vals)?;
        Ok(tape.value(loss).as_f64())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut vals = Vec::with_capacity(params.len());
    for (data, shape) in params {
        vals.push(tape.leaf(data.clone(), shape.clone())?);
    }
    let loss = build(&mut tape, &vals)?;
    if !tape.value(loss).as_f64().is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    tape.backward(loss)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        entries_checked: 0,
        failures: Vec::new(),
    };
    let h = T::from_f64(step);
    let mut data: Vec<Vec<T>> = params.iter().map(|(d, _)| d.clone()).collect();
    for p in 0..params.len() {
        let analytic: Vec<f64> = match tape.grad(vals[p]) {
            Some(gs) => gs.iter().map(|&g| g.as_f64()).collect(),
            None => vec![0.0; params[p].0.len()],
        };
        for e in 0..params[p].0.len() {
            let orig = data[p][e];
            data[p][e] = orig + h;
            let up = eval(&data)?;
            data[p][e] = orig - h;
            let down = eval(&data)?;
            data[p][e] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite-difference evaluation at parameter {p} entry {e}"
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic[e], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
            if err > tolerance {
                report.failures.push(GradFailure {
                    param: p,
                    entry: e,
                    analytic: analytic[e],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}
