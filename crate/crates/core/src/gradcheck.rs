//! Central finite-difference checks of analytic gradients.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)` where `a`
//! is the backpropagated gradient and `n` the central difference
//! `(f(x + eps) - f(x - eps)) / (2 eps)`. Checks run in `f64`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::param::ParamStore;
use crate::{Graph, Result, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of a scalar function of one tensor. `f` receives a
/// fresh graph and the leaf for `x` and returns the scalar output.
pub fn finite_diff_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.input(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(&g, leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.input(t);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    pub eps: f64,
    /// Test hook: perturb one analytic gradient entry before comparing, so
    /// callers can confirm the check actually fails on a wrong gradient.
    pub corrupt_gradient: bool,
}

impl CheckOptions {
    pub fn new() -> Self {
        CheckOptions {
            eps: DEFAULT_EPS,
            corrupt_gradient: false,
        }
    }
}

/// Compares backpropagated gradients of every non-frozen parameter in `store`
/// with central differences of `loss`.
pub fn check_parameters<L>(store: &mut ParamStore<f64>, loss: L, opts: &CheckOptions) -> Result<Vec<ParamCheck>>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward_into(out, store)?;
    let mut analytic: Vec<Tensor<f64>> = store
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    if opts.corrupt_gradient {
        if let Some(t) = analytic.iter_mut().find(|t| t.numel() > 0) {
            t.data_mut()[0] += 1.0;
        }
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.names().map(|n| store.id(n).expect("own name")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        if store.get(id).frozen {
            continue;
        }
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            numel: store.get(id).value.numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..check.numel {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[k].data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    store.zero_grad();
    Ok(report)
}
