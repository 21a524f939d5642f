//! Central finite-difference oracle for testing tape gradients.
//!
//! Only forward evaluation is used, so the oracle is independent of every
//! backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar graph from leaves already placed on the tape.
pub trait ScalarGraph: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarGraph for F {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning roundoff into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(graph: &impl ScalarGraph, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    Ok(tape.value(out).item().expect("graph must return a scalar"))
}

/// Compares tape gradients of every input against central differences with
/// step `h`.
pub fn check_gradients(graph: impl ScalarGraph, inputs: &[Tensor], h: f64) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape())?;
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&graph, &work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&graph, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(analytic.data()[i], numeric, 1e-3));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err, checked })
}
