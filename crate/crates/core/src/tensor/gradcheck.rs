use rayon::prelude::*;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub epsilon: f64,
}

/// Checks the gradient of the scalar built by `f` with respect to `input`.
///
/// Runs entirely in `f64`. Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`. Coordinates are evaluated in parallel and
/// reduced in coordinate order.
pub fn grad_check<F>(op: &str, f: F, input: &Tensor<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var> + Sync,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Param(format!("grad_check epsilon must be > 0, got {epsilon}")));
    }
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let root = f(&mut g, x)?;
    g.backward(root)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let eval = |values: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(values);
        let root = f(&mut g, x)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(Error::Autograd("grad_check function must return a scalar".into()));
        }
        Ok(v.item())
    };

    let numeric: Vec<f64> = (0..input.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = input.clone();
            plus.data_mut()[i] += epsilon;
            let mut minus = input.clone();
            minus.data_mut()[i] -= epsilon;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * epsilon))
        })
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut worst_coordinate = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_coordinate = i;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_relative_error: worst,
        worst_coordinate,
        epsilon,
    })
}
