//! Central finite-difference gradient checking against the tape.

use super::{Matrix, Tape, Var};
use crate::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares tape gradients of the scalar built by `f` with central differences
/// of step `h`, taken w.r.t. every entry of every input.
pub fn check_gradient<F>(f: F, inputs: &[Matrix], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck {
        relative_error,
        analytic_norm: a2.sqrt(),
    })
}
