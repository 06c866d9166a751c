use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let inputs: Vec<Tensor> = xs.iter().map(|x| x.clone().with_grad()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.scalar(out)?;
    if !base.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.scalar(out)?;
        if !y.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(y)
    };

    let mut probe = xs.to_vec();
    let mut worst = 0.0_f64;
    for (t, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = probe[t].data()[k];
            probe[t].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[t].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numeric("gradient comparison produced a non-finite value".into()));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
