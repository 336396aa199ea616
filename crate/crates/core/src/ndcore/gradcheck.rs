//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Bindings, Graph};
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and numeric gradients for one input.
#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|i| i.failures == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Relative error with `max(1, |a|, |b|)` in the denominator, so tiny
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the graph's analytic gradient against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of every input.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let analytic = graph.backward(bindings)?;
    let mut work = bindings.clone();
    let mut inputs = Vec::new();

    for (name, _) in graph.inputs() {
        let grad = analytic.get(name).expect("every input has a gradient");
        let mut check = InputCheck {
            name: name.to_string(),
            coords: grad.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            failures: 0,
        };
        for i in 0..grad.len() {
            let x0 = bindings.get(name).expect("bound input").data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + step;
            let plus = graph.eval_output(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x0 - step;
            let minus = graph.eval_output(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            if !(err <= tol) {
                check.failures += 1;
            }
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        inputs.push(check);
    }
    Ok(GradCheckReport { step, tol, inputs })
}
