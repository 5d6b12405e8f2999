//! Central finite-difference gradient verification.
//!
//! Used by the test suites to check every loss-bearing operation on
//! micro-configs. The builder closure must construct the loss from scratch
//! each call so perturbed parameter values flow through the whole forward.

use super::graph::{Graph, Tensor};
use super::params::{Binding, ParamSet};

/// Compare analytic gradients of a scalar loss against central finite
/// differences of step `h`, elementwise over every parameter.
///
/// Returns the maximum per-tensor relative error
/// `||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-10)`.
pub fn max_rel_grad_error(
    params: &mut ParamSet,
    h: f64,
    build: impl Fn(&ParamSet, &mut Graph, &Binding) -> Tensor,
) -> f64 {
    let eval = |p: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let bind = p.bind(&mut g);
        let loss = build(p, &mut g, &bind);
        g.scalar_value(loss)
    };

    // Analytic pass.
    let analytic = {
        let mut g = Graph::new();
        let bind = params.bind(&mut g);
        let loss = build(params, &mut g, &bind);
        let grads = g.backward(loss);
        bind.grads(&g, &grads)
    };

    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        let id = super::params::ParamId(idx);
        let shape: Vec<usize> = params.get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut numeric = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
        for flat in 0..n {
            let orig = params.get(id).as_slice().unwrap()[flat];
            params.get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let fp = eval(params);
            params.get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let fm = eval(params);
            params.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            numeric.as_slice_mut().unwrap()[flat] = (fp - fm) / (2.0 * h);
        }
        let a = &analytic[idx];
        let diff = (a - &numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / (na + nn).max(1e-10);
        worst = worst.max(rel);
    }
    worst
}
