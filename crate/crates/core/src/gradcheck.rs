//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward sweep it checks.

use crate::diffgraph::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Magnitudes below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Builds `f` on fresh graphs with `params` bound as trainable leaves and
/// compares the backward-sweep gradients against central differences with
/// step `h`.
pub fn check_gradients<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = values.iter().map(|v| g.param(v.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let ids = params.iter().map(|v| g.param(v.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    let grads = g.gradients(out, &ids)?;
    let analytic: Vec<Tensor> = grads.iter().map(|&id| g.value(id).clone()).collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        let mut est = vec![0.0; params[p].len()];
        for (i, e) in est.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            *e = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(params[p].shape().to_vec(), est)?);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        analytic,
        numeric,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let (a, n) = (report.analytic[p].data()[i], report.numeric[p].data()[i]);
            let r = rel_err(a, n);
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
