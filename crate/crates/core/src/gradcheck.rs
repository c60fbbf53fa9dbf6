//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Outcome of a gradient check over one or more inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn finite<T: Real>(v: T, what: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}")))
    }
}

/// Compares a hand-supplied gradient against central differences of `f`.
pub fn check_analytic<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    grad: impl Fn(&Tensor<T>) -> Result<Vec<T>>,
    x: &Tensor<T>,
    eps: T,
) -> Result<GradCheckReport> {
    finite(f(x)?, "f(x)")?;
    let analytic = grad(x)?;
    if analytic.len() != x.numel() {
        return Err(Error::dim(0, "analytic gradient length differs from input"));
    }
    let mut report = empty_report();
    let mut probe = x.detached();
    for i in 0..x.numel() {
        let numeric = central_difference(&mut probe, i, eps, |t| f(t))?;
        update(&mut report, 0, i, analytic[i].f64(), numeric);
    }
    Ok(report)
}

/// Gradient check of a scalar graph function of a single input.
pub fn grad_check<T: Real>(
    f: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: T,
) -> Result<f64> {
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps).map(|r| r.max_rel_error)
}

/// Gradient check of a scalar graph function with respect to every element of every input.
pub fn grad_check_many<T: Real>(
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    eps: T,
) -> Result<GradCheckReport> {
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.detached())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    finite(g.value(out).item()?, "f(x)")?;
    g.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
        .collect();

    let mut report = empty_report();
    let mut probes: Vec<Tensor<T>> = inputs.iter().map(Tensor::detached).collect();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let numeric = {
                let orig = probes[which].data()[i];
                probes[which].data_mut()[i] = orig + eps;
                let plus = finite(eval(&probes)?, "f(x + eps)")?;
                probes[which].data_mut()[i] = orig - eps;
                let minus = finite(eval(&probes)?, "f(x - eps)")?;
                probes[which].data_mut()[i] = orig;
                (plus.f64() - minus.f64()) / (2.0 * eps.f64())
            };
            update(&mut report, which, i, a.f64(), numeric);
        }
    }
    Ok(report)
}

fn central_difference<T: Real>(
    probe: &mut Tensor<T>,
    i: usize,
    eps: T,
    f: impl Fn(&Tensor<T>) -> Result<T>,
) -> Result<f64> {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let plus = finite(f(probe)?, "f(x + eps)")?;
    probe.data_mut()[i] = orig - eps;
    let minus = finite(f(probe)?, "f(x - eps)")?;
    probe.data_mut()[i] = orig;
    Ok((plus.f64() - minus.f64()) / (2.0 * eps.f64()))
}

fn empty_report() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    }
}

fn update(r: &mut GradCheckReport, which: usize, i: usize, analytic: f64, numeric: f64) {
    let e = relative_error(analytic, numeric);
    if e > r.max_rel_error || e.is_nan() {
        *r = GradCheckReport {
            max_rel_error: e,
            worst: (which, i),
            analytic,
            numeric,
        };
    }
}
