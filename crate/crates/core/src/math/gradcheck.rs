use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `build` (which must return a scalar node) against central
/// differences with step `h`, perturbing every element of every input.
///
/// `floor` keeps near-zero gradients from producing meaningless ratios.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    if !(h > 0.0 && floor > 0.0) {
        return Err(invalid("step and floor must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap_or_default().to_vec()).collect();

    let mut best = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[k] = orig;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > best.max_rel_error {
                best = GradCheck {
                    max_rel_error: rel,
                    worst: (i, k),
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(best)
}
