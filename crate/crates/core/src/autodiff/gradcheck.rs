//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with a floor so that two vanishing gradients compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `d loss / d param` from [`Graph::backward`] against central
/// differences with step `eps`, on up to `per_tensor` evenly spaced
/// coordinates of every tensor in `store`.
pub fn check(
    store: &mut ParamStore,
    eps: f64,
    per_tensor: usize,
    build: impl Fn(&mut Graph, &Bound) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = build(&mut g, &bound);
    g.backward(loss);
    let analytic = bound.grads(&g);
    drop(g);

    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let l = build(&mut g, &b);
        g.value(l).item()
    };

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for ti in 0..store.len() {
        let len = store.tensors_mut()[ti].len();
        let stride = (len / per_tensor.max(1)).max(1);
        for j in (0..len).step_by(stride).take(per_tensor) {
            let orig = store.tensors_mut()[ti].data[j];
            store.tensors_mut()[ti].data[j] = orig + eps;
            let plus = eval(store);
            store.tensors_mut()[ti].data[j] = orig - eps;
            let minus = eval(store);
            store.tensors_mut()[ti].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[ti].data[j], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((names[ti].clone(), j));
            }
        }
    }
    report
}
