use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Compares reverse-mode gradients with central differences.
///
/// Returns the maximum over every coordinate of every parameter of
/// `|autodiff - numeric| / (|numeric| + 1e-12)`. Any forward failure
/// during probing is reported as an infinite error rather than an `Err`.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, eps: f64) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Option<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s).ok()?;
        g.scalar(loss).ok()
    };

    let mut graph = Graph::new();
    let Ok(loss) = f(&mut graph, store) else {
        return f64::INFINITY;
    };
    let Ok(grads) = graph.backward(loss) else {
        return f64::INFINITY;
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = store.get(id).values()[i];
            probe.get_mut(id).values_mut()[i] = orig + eps;
            let plus = eval(&probe);
            probe.get_mut(id).values_mut()[i] = orig - eps;
            let minus = eval(&probe);
            probe.get_mut(id).values_mut()[i] = orig;
            let (Some(p), Some(m)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (p - m) / (2.0 * eps);
            let err = (a - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    worst
}
