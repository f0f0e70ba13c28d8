use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and returns
/// the scalar output. Each parameter entry is perturbed by `±h`; the quotient
/// uses the exact perturbation that survives `f32` rounding and the `f64`
/// value reported by [`Tape::scalar`]. Returns the maximum over all entries of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!("step h={h} must lie in (0, 1e-2]")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for (ei, &x) in param.data().iter().enumerate() {
            let plus = (x as f64 + h) as f32;
            let minus = (x as f64 - h) as f32;
            probe[pi] = with_entry(param, ei, plus);
            let f_plus = evaluate(&probe)?;
            probe[pi] = with_entry(param, ei, minus);
            let f_minus = evaluate(&probe)?;
            probe[pi] = param.clone();
            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let err = (analytic[pi][ei] as f64 - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn with_entry(t: &Tensor, index: usize, value: f32) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
