//! Minimal dense-matrix autodiff used by the fusion model.

mod graph;
mod mat;
mod scalar;

pub use graph::{log_sum_exp, sigmoid, AttentionMask, Gradients, Graph, ParamId, ParamStore, Var};
pub use mat::{gemm, Mat, View, ViewMut};
pub use scalar::{DType, Scalar};

/// Central-difference gradient check of `loss` with respect to selected
/// scalar entries `(param, flat index)`. Returns `(analytic, numeric)` per
/// entry.
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    entries: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Vec<(f64, f64)>
where
    F: FnMut(&mut Graph<'_, f64>) -> Var,
{
    let mut grads = Gradients::zeros_like(store);
    {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l, &mut grads);
    }
    let mut eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.value(l).data[0]
    };
    entries
        .iter()
        .map(|&(id, idx)| {
            let orig = store.get(id).data[idx];
            store.get_mut(id).data[idx] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data[idx] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data[idx] = orig;
            (grads.get(id).data[idx], (plus - minus) / (2.0 * h))
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
