//! Central finite-difference oracle for autodiff gradients.
//!
//! The oracle only ever evaluates forward passes; it never reads a gradient
//! produced by the graph, so it stays independent of the backward code it
//! checks.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst scalar.
    pub worst: (usize, usize),
    pub scalars_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(params: &[Tensor], f: &mut F, track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(&p.clone().with_requires_grad(track)))
        .collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares autodiff gradients of `f` against central differences over every
/// scalar of every tensor in `params`. `f` must be deterministic.
pub fn check<F>(params: &[Tensor], step: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = evaluate(params, &mut f, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).map(|s| s.to_vec()).unwrap_or(vec![0.0; p.numel()]))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        scalars_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let (g1, _, l1) = evaluate(&work, &mut f, false)?;
            work[p].data_mut()[i] = orig - step;
            let (g2, _, l2) = evaluate(&work, &mut f, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (g1.value(l1)[0] - g2.value(l2)[0]) / (2.0 * step);
            let err = relative_error(analytic[p][i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, i);
            }
            report.scalars_checked += 1;
        }
    }
    Ok(report)
}
