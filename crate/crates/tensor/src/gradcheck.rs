//! Central finite-difference checks against the tape's analytic gradients.

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error with a small floor on the denominator so that gradients
/// that are numerically zero on both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares `d f / d inputs` from the tape with central differences of step `h`.
///
/// `f` builds a scalar from the supplied leaves; it is re-run for each
/// perturbation so it must be deterministic.
pub fn check_gradients<F>(inputs: &[Matrix], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|v| tape.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(TensorError::Contract("gradient check needs a scalar output".into()));
    }
    let grads = tape.backward(out)?;

    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    compare_with_differences(inputs, &analytic, h, eval)
}

/// Compares precomputed `analytic` gradients of `eval` at `inputs` with
/// central differences of step `h`.
pub fn compare_with_differences<F, E>(inputs: &[Matrix], analytic: &[Matrix], h: f64, mut eval: F) -> std::result::Result<GradCheck, E>
where
    F: FnMut(&[Matrix]) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    if inputs.len() != analytic.len() || inputs.iter().zip(analytic).any(|(i, a)| i.shape() != a.shape()) {
        return Err(TensorError::Contract("analytic gradients do not match the inputs".into()).into());
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[e];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.entries += 1;
        }
    }
    Ok(report)
}
