use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
}

/// Compare the tape gradient of a scalar function with central differences
/// (Richardson-extrapolated from steps `h` and `h/2`).
///
/// `f` receives a fresh tape and the input handle and must return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        let val = tape.value(out).item()? as f64;
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(val)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    // Central difference at step `d`, using the actually representable step
    // so rounding of x +- d does not bias the slope.
    let slope = |i: usize, d: f64| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += d as Real;
        let mut minus = x.clone();
        minus.data_mut()[i] -= d as Real;
        let span = plus.data()[i] as f64 - minus.data()[i] as f64;
        Ok((eval(plus)? - eval(minus)?) / span)
    };
    for i in 0..x.numel() {
        // Richardson extrapolation cancels the h^2 error term.
        let numeric = (4.0 * slope(i, h / 2.0)? - slope(i, h)?) / 3.0;
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(report)
}
