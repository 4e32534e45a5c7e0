//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na + nn < 1e-300 {
        0.0
    } else {
        diff / (na + nn)
    }
}

/// Checks the gradient of a scalar function of `inputs`.
///
/// `build` records the function on a fresh graph given one leaf per input
/// and returns the scalar output. It is re-run for every perturbation, so it
/// must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let params: Vec<Parameter> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| Parameter::trainable(format!("input{i}"), t.clone()))
        .collect();
    let eval = |params: &[Parameter]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut perturbed = params.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = inputs[i].data()[j];
            perturbed[i].value_mut().data_mut()[j] = base + step;
            let plus = eval(&perturbed)?;
            perturbed[i].value_mut().data_mut()[j] = base - step;
            let minus = eval(&perturbed)?;
            perturbed[i].value_mut().data_mut()[j] = base;
            *slot = (plus - minus) / (2.0 * step);
        }
        let max_abs_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        report.push(GradCheck {
            name: params[i].name().to_string(),
            rel_error: relative_error(&analytic, &numeric),
            max_abs_error,
        });
    }
    Ok(report)
}
