//! Central finite-difference gradient checking.
//!
//! This path never touches the tape's backward sweep: it re-evaluates the
//! supplied forward closure at perturbed parameter values, so it serves as an
//! independent oracle for analytic gradients.

use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

/// Default perturbation step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error denominator floor; below it the comparison is absolute.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Central-difference gradients of `eval` with respect to every entry of
/// every tensor in `params`.
pub fn central_difference_gradients<F>(
    params: &BTreeMap<String, Tensor>,
    step: f64,
    mut eval: F,
) -> Result<BTreeMap<String, Tensor>, NumericsError>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64, NumericsError>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let base = params[&name].clone();
        let mut grad = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[k] += step;
            work.insert(name.clone(), Tensor::new(base.shape().to_vec(), plus)?);
            let f_plus = eval(&work)?;

            let mut minus = base.data().to_vec();
            minus[k] -= step;
            work.insert(name.clone(), Tensor::new(base.shape().to_vec(), minus)?);
            let f_minus = eval(&work)?;

            grad[k] = (f_plus - f_minus) / (2.0 * step);
        }
        work.insert(name.clone(), base.clone());
        out.insert(name, Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest relative error between two gradient sets over all entries.
///
/// Entries are compared as `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn max_relative_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = &numeric[name];
        for (av, nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn finite_differences_match_tape_on_quadratic() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::vector(vec![1.5, -2.0]).unwrap());

        let numeric = central_difference_gradients(&params, DEFAULT_STEP, |p| {
            // f = mean(x * x)
            let x = &p["x"];
            Ok(x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
        })
        .unwrap();

        let mut tape = Tape::new();
        let x = tape.param("x", params["x"].clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = BTreeMap::new();
        analytic.insert("x".to_string(), grads.require("x").unwrap().clone());

        assert!(max_relative_error(&analytic, &numeric) < 1e-8);
    }
}
