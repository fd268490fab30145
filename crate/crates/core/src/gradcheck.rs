//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

// The perturbed coordinates as actually stored. In f32 `x ± h` rounds, so
// the difference quotient divides by the realised step rather than `2h`.
fn steps<T: Real>(x: T, h: f64) -> (T, T) {
    (T::from_f64(x.to_f64() + h), T::from_f64(x.to_f64() - h))
}

fn eval<T: Real, F>(f: &F, theta: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(theta.clone());
    let y = f(&mut g, x)?;
    let v = g.scalar(y);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the gradient of the scalar function `f` at `theta` with central
/// differences of step `h`. Returns the maximum relative error over all
/// coordinates.
pub fn grad_check<T: Real, F>(f: F, theta: &Tensor<T>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(theta.clone());
    let y = f(&mut g, x)?;
    if !g.scalar(y).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(gr) => gr.iter().map(|v| v.to_f64()).collect(),
        None => alloc::vec![0.0; theta.numel()],
    };
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        let (up, down) = steps(orig, h);
        probe.data_mut()[i] = up;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = down;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (up.to_f64() - down.to_f64());
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: alloc::string::String,
    pub max_relative_error: f64,
    /// Largest `|analytic - numeric|` over the coordinates.
    pub max_absolute_error: f64,
    /// Largest `|analytic|`, the scale the absolute error compares against.
    pub max_gradient: f64,
}

/// Finite-difference check of every parameter in `store` (or those accepted
/// by `filter`) against the gradient of `loss`.
pub fn grad_check_params<T: Real, F>(
    store: &ParamStore<T>,
    loss: F,
    h: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = loss(&mut g, store)?;
    g.backward(y)?;
    let mut analytic: Vec<Option<Vec<f64>>> = alloc::vec![None; store.len()];
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad.map(|gr| gr.iter().map(|v| v.to_f64()).collect());
    }
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::inference();
        let y = loss(&mut g, s)?;
        let v = g.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !filter(&p.name) {
            continue;
        }
        let mut worst = 0.0f64;
        let mut worst_abs = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..p.value.numel() {
            let a = analytic[id.index()].as_ref().map_or(0.0, |v| v[i]);
            let orig = p.value.data()[i];
            let (up, down) = steps(orig, h);
            probe.get_mut(id).value.data_mut()[i] = up;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = down;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (up.to_f64() - down.to_f64());
            worst = worst.max(relative_error(a, numeric));
            worst_abs = worst_abs.max((a - numeric).abs());
            scale = scale.max(a.abs());
        }
        out.push(ParamCheck {
            name: p.name.clone(),
            max_relative_error: worst,
            max_absolute_error: worst_abs,
            max_gradient: scale,
        });
    }
    Ok(out)
}
