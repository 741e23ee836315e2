use super::{Gradients, Graph, NodeId, ParamStore};
use crate::error::Result;

/// Worst disagreement between tape gradients and central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares [`Graph::backward`] against `(f(θ+h) − f(θ−h)) / 2h` for every
/// scalar parameter. `build` must record a scalar loss on a fresh graph.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from dominating.
pub fn grad_check<F>(store: &ParamStore, h: f64, floor: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (g, root) = build(store)?;
    let analytic: Gradients = g.backward(root, store);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let base = store.get(id).data[i];
            probe.get_mut(id).data[i] = base + h;
            let (gp, rp) = build(&probe)?;
            probe.get_mut(id).data[i] = base - h;
            let (gm, rm) = build(&probe)?;
            probe.get_mut(id).data[i] = base;
            let numeric = (gp.scalar(rp) - gm.scalar(rm)) / (2.0 * h);
            let a = analytic.get(id)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
