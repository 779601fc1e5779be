use super::tape::{Tape, Var};
use super::Tensor;
use crate::{Error, Result};

fn eval<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got {} values",
            v.len()
        )));
    }
    if !v[0].is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    Ok(v[0])
}

/// Central-difference gradient of a scalar function for every input coordinate.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape().to_vec());
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval(&mut f, &probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval(&mut f, &probe)?;
            probe[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let numeric = central_difference(f, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            if !ga.is_finite() {
                return Err(Error::Numeric("analytic gradient is not finite".into()));
            }
            worst = worst.max((ga - gn).abs() / gn.abs().max(1.0));
        }
    }
    Ok(worst)
}
