//! Central finite-difference verification of analytic gradients.

use crate::graph::{grad_of, Graph, NodeId};
use crate::tensor::Params;
use crate::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` seen.
    pub max_rel_error: f64,
    /// Parameter and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    /// Number of coordinates compared.
    pub coords: usize,
}

fn evaluate<F>(f: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    Ok(v)
}

/// Compares analytic gradients of `f` against central differences on every
/// coordinate of every parameter.
///
/// `f` must build its loss by registering parameters from the given set and
/// return the scalar loss node.
pub fn finite_diff_check<F>(f: F, params: &Params, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    finite_diff_check_sampled(f, params, step, usize::MAX)
}

/// Like [`finite_diff_check`] but compares at most `max_per_param` evenly
/// spaced coordinates of each parameter.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &Params,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if !g.scalar(loss)?.is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    let analytic = grad_of(loss, &g)?;
    drop(g);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let Some(grad) = analytic.get(name) else {
            continue;
        };
        let n = tensor.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = tensor.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coords += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
