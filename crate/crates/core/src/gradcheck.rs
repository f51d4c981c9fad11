//! Central-difference gradient verification.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Coordinates whose relative error reached the tolerance.
    pub failures: Vec<CoordinateError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Compares two gradient vectors coordinate by coordinate.
    pub fn compare(analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut report = GradCheckReport {
            tolerance,
            ..Default::default()
        };
        for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            report.push(index, a, n);
        }
        report
    }

    pub(crate) fn push(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel_err = relative_error(analytic, numeric);
        self.checked += 1;
        // NaN must count as a failure
        if rel_err.is_nan() || rel_err > self.max_rel_err {
            self.max_rel_err = if rel_err.is_nan() { f64::INFINITY } else { rel_err };
        }
        if !(rel_err < self.tolerance) {
            self.failures.push(CoordinateError {
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
}

/// Central differences `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, theta: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(theta.shape(), out)
}

/// Checks the tape gradient of a scalar function of `theta` against central differences.
///
/// `build` records the function on a fresh tape given `theta` as an input and
/// returns the scalar output.
pub fn finite_diff_check<F>(build: F, theta: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(theta.clone());
    let out = build(&mut tape, x)?;
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?
            .wrt(x)
            .unwrap_or_else(|| Tensor::zeros(theta.shape()))
    } else if tape.value(out).is_scalar() {
        Tensor::zeros(theta.shape())
    } else {
        return Err(Error::Contract("function must return a scalar".into()));
    };
    let numeric = numeric_gradient(
        |t| {
            let mut tape = Tape::new();
            let x = tape.input(t.clone());
            let out = build(&mut tape, x)?;
            Ok(tape.value(out).data()[0])
        },
        theta,
        h,
    )?;
    Ok(GradCheckReport::compare(analytic.data(), numeric.data(), tol))
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `store` and reports per parameter group, in store order.
///
/// `build` records the loss on a fresh tape with the parameters bound.
pub fn check_params<F>(store: &ParamStore, build: F, h: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let mut probe = store.clone();
    for (id, param) in store.iter() {
        let analytic = grads
            .wrt(bound.get(id))
            .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        let numeric = numeric_gradient(
            |t| {
                probe.get_mut(id).value = t.clone();
                let mut tape = Tape::new();
                let bound = probe.bind(&mut tape);
                let out = build(&mut tape, &bound)?;
                Ok(tape.value(out).data()[0])
            },
            &param.value,
            h,
        )?;
        probe.get_mut(id).value = param.value.clone();
        let idx = match reports.iter().position(|(g, _)| *g == param.group) {
            Some(i) => i,
            None => {
                let report = GradCheckReport {
                    tolerance: tol,
                    ..Default::default()
                };
                reports.push((param.group.clone(), report));
                reports.len() - 1
            }
        };
        let report = &mut reports[idx].1;
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            report.push(i, a, n);
        }
    }
    Ok(reports)
}
