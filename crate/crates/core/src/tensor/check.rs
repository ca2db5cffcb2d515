//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::mat::Mat;
use super::store::ParamStore;

/// Worst entry found by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients against central finite differences of `f`.
///
/// Perturbs every entry of every parameter named in `grads` by `+-h`,
/// evaluating `f` twice per entry. Relative error uses a 1e-6 floor so
/// near-zero gradients are compared absolutely.
pub fn finite_diff_check(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Mat>,
    mut f: impl FnMut(&ParamStore) -> f64,
    h: f64,
) -> FiniteDiffReport {
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in names {
        let len = store.get(&name).expect("param exists").data.len();
        for i in 0..len {
            let orig = store.get(&name).unwrap().data[i];
            store.get_mut(&name).unwrap().data[i] = orig + h;
            let fp = f(store);
            store.get_mut(&name).unwrap().data[i] = orig - h;
            let fm = f(store);
            store.get_mut(&name).unwrap().data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[&name].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = FiniteDiffReport {
                    max_rel_err: rel,
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic,
                    numeric,
                };
            }
        }
    }
    report
}
