use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients of a scalar function against central finite
/// differences for every element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| g.constant(p.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let x0 = work[pi].data()[ei];
            work[pi].data_mut()[ei] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, ei));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
