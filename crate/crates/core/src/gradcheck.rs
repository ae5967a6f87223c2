//! Central finite-difference gradient checker.
//!
//! Compares the tape's reverse-mode gradient to
//! (f(x+eps) − f(x−eps)) / 2eps per coordinate in f64 and reports the
//! max over coordinates of |a−n| / max(1e-8, |a|+|n|).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Check a scalar-valued composition against central differences over
/// every coordinate of every input. The closure must be a pure function
/// of the given inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape("grad_check: output must be scalar".into()));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::NonFinite("grad_check: forward output".into()));
        }
        Ok(x)
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars);
    if tape.value(out).len() != 1 {
        return Err(Error::Shape("grad_check: output must be scalar".into()));
    }
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check: forward output".into()));
    }
    let grads = tape.backward(out);

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let zero;
        let analytic = match &grads[vars[ii].0] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(input.shape());
                &zero
            }
        };
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[ii].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: numeric gradient at input {ii} coord {j}"
                )));
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
