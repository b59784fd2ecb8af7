//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever reads forward values, so it is independent of
//! every backward rule it validates.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root);
        if v.shape() != (1, 1) {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(v.item())
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[k]);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_relative_error = report.max_relative_error.max(relative_error(a, numeric));
            report.entries += 1;
        }
    }
    Ok(report)
}
