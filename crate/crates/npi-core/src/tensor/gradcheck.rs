//! Central finite-difference utilities.
//!
//! These only ever call the forward path, so they stay independent of the
//! backward code they are used to check. Instantiate the graph with `f64`
//! elements for tight tolerances.

use crate::tensor::{Scalar, Tensor};

/// Central finite differences of `loss()` w.r.t. every entry of `param`.
///
/// `loss` must rebuild the forward computation from scratch on every call,
/// reading the current contents of `param`.
pub fn finite_diff<T: Scalar>(param: &Tensor<T>, h: f64, mut loss: impl FnMut() -> T) -> Vec<T> {
    let base = param.to_vec();
    let ht = T::from_f64(h);
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + ht;
        param.set_data(&plus);
        let up = loss();

        let mut minus = base.clone();
        minus[i] = minus[i] - ht;
        param.set_data(&minus);
        let down = loss();

        grad.push((up - down) / (ht + ht));
    }
    param.set_data(&base);
    grad
}

/// Worst-case relative error between two gradient vectors, with an absolute
/// floor so near-zero entries compare on an absolute scale.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a.into_f64();
            let n = n.into_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
        })
        .fold(0.0, f64::max)
}
