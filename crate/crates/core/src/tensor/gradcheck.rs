//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Worst relative disagreement for one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputReport {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`, or the
    /// absolute difference when both norms are below `1e-12`.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

fn eval(inputs: &[Tensor<f64>], build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares the backward pass of `build` against central differences for
/// every element of every input. `build` receives one leaf per input and
/// returns a scalar.
pub fn check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<InputReport>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zero).clone();
        let mut numeric = Vec::with_capacity(inputs[i].len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = eval(&probe, &build)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = eval(&probe, &build)?;
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let a_norm = norm(&mut analytic.data().iter().copied());
        let n_norm = norm(&mut numeric.iter().copied());
        let diff = norm(&mut analytic.data().iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = a_norm.max(n_norm);
        reports.push(InputReport {
            relative_error: if scale < 1e-12 { diff } else { diff / scale },
            analytic_norm: a_norm,
        });
    }
    Ok(reports)
}

/// Largest relative error over all inputs.
pub fn max_relative_error(reports: &[InputReport]) -> f64 {
    reports.iter().map(|r| r.relative_error).fold(0.0, f64::max)
}
