//! Consistency, similarity and instance losses between two feature maps.
//!
//! All three are negated (or shifted) cosines, so each is invariant to
//! positive rescaling of either operand. Norms in denominators are clamped
//! from below by `eps` so zero feature vectors yield a zero cosine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cons: f64,
    pub l_sim: f64,
    pub l_inst: f64,
    pub l_clld: f64,
}

impl LossBreakdown {
    pub fn from_terms(l_cons: f64, l_sim: f64, l_inst: f64) -> Self {
        Self {
            l_cons,
            l_sim,
            l_inst,
            l_clld: l_cons + l_sim + l_inst,
        }
    }

    /// Term-wise mean; `l_clld` is re-summed from the averaged terms.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_terms(avg(|b| b.l_cons), avg(|b| b.l_sim), avg(|b| b.l_inst))
    }
}

/// Which terms enter the optimized sum. Disabled terms are neither computed nor reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub use_sim: bool,
    pub use_cons: bool,
    pub use_inst: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            use_sim: true,
            use_cons: true,
            use_inst: true,
        }
    }
}

fn check_pair(g: &Graph<impl Real>, y: Var, y_prime: Var) -> Result<()> {
    let (a, b) = (g.shape(y), g.shape(y_prime));
    if a.len() != 3 {
        return Err(Error::dim(0, format!("feature map must be [c,h,w], got {a:?}")));
    }
    if a != b {
        let axis = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
        return Err(Error::dim(axis, format!("feature maps differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Negative mean over pixels of the cosine between channel vectors.
pub fn consistency_loss_var<T: Real>(g: &mut Graph<T>, y: Var, y_prime: Var, eps: T) -> Result<Var> {
    check_pair(g, y, y_prime)?;
    let prod = g.mul(y, y_prime)?;
    let dots = g.sum_axis(prod, 0)?;
    let ny = g.l2_norm_axis(y, 0)?;
    let ny = g.clamp_min(ny, eps);
    let nyp = g.l2_norm_axis(y_prime, 0)?;
    let nyp = g.clamp_min(nyp, eps);
    let den = g.mul(ny, nyp)?;
    let cos = g.div(dots, den)?;
    let m = g.mean(cos);
    Ok(g.neg(m))
}

fn neg_cosine<T: Real>(g: &mut Graph<T>, a: Var, b: Var, eps: T) -> Result<Var> {
    let dot = g.dot(a, b)?;
    let na = g.l2_norm(a)?;
    let na = g.clamp_min(na, eps);
    let nb = g.l2_norm(b)?;
    let nb = g.clamp_min(nb, eps);
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    Ok(g.neg(cos))
}

/// Negative cosine between `CS(y, y')` and `CS(y', y)`, each flattened whole.
pub fn similarity_loss_var<T: Real>(
    g: &mut Graph<T>,
    y: Var,
    y_prime: Var,
    alpha: usize,
    eps: T,
) -> Result<Var> {
    check_pair(g, y, y_prime)?;
    let a = g.cross_similarity(y, y_prime, alpha)?;
    let b = g.cross_similarity(y_prime, y, alpha)?;
    neg_cosine(g, a, b, eps)
}

/// `2 − 2·cos` between the globally pooled channel vectors.
pub fn instance_loss_var<T: Real>(g: &mut Graph<T>, y: Var, y_prime: Var, eps: T) -> Result<Var> {
    check_pair(g, y, y_prime)?;
    let py = g.global_avg_pool(y)?;
    let pyp = g.global_avg_pool(y_prime)?;
    let normalized = |g: &mut Graph<T>, p: Var| -> Result<Var> {
        let n = g.l2_norm(p)?;
        let n = g.clamp_min(n, eps);
        g.div(p, n)
    };
    let hy = normalized(g, py)?;
    let hyp = normalized(g, pyp)?;
    let dot = g.dot(hy, hyp)?;
    let s = g.scale(dot, T::of(-2.0));
    Ok(g.add_scalar(s, T::of(2.0)))
}

/// Graph handles of the enabled loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cons: Option<Var>,
    pub sim: Option<Var>,
    pub inst: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].f64());
        LossBreakdown::from_terms(val(self.cons), val(self.sim), val(self.inst))
    }
}

pub fn clld_loss_var<T: Real>(
    g: &mut Graph<T>,
    y: Var,
    y_prime: Var,
    alpha: usize,
    eps: T,
    switches: LossSwitches,
) -> Result<LossVars> {
    let cons = switches
        .use_cons
        .then(|| consistency_loss_var(g, y, y_prime, eps))
        .transpose()?;
    let sim = switches
        .use_sim
        .then(|| similarity_loss_var(g, y, y_prime, alpha, eps))
        .transpose()?;
    let inst = switches
        .use_inst
        .then(|| instance_loss_var(g, y, y_prime, eps))
        .transpose()?;
    let mut total: Option<Var> = None;
    for term in [cons, sim, inst].into_iter().flatten() {
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossVars {
        cons,
        sim,
        inst,
        total,
    })
}

fn eval<T: Real>(
    y: &Tensor<T>,
    y_prime: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(y.detached());
    let b = g.constant(y_prime.detached());
    let out = f(&mut g, a, b)?;
    Ok(g.value(out).item()?.f64())
}

pub fn consistency_loss<T: Real>(y: &Tensor<T>, y_prime: &Tensor<T>, eps: f64) -> Result<f64> {
    eval(y, y_prime, |g, a, b| consistency_loss_var(g, a, b, T::of(eps)))
}

pub fn similarity_loss<T: Real>(y: &Tensor<T>, y_prime: &Tensor<T>, alpha: usize, eps: f64) -> Result<f64> {
    eval(y, y_prime, |g, a, b| similarity_loss_var(g, a, b, alpha, T::of(eps)))
}

pub fn instance_loss<T: Real>(y: &Tensor<T>, y_prime: &Tensor<T>, eps: f64) -> Result<f64> {
    eval(y, y_prime, |g, a, b| instance_loss_var(g, a, b, T::of(eps)))
}

/// All three terms and their sum.
pub fn clld_loss<T: Real>(y: &Tensor<T>, y_prime: &Tensor<T>, alpha: usize, eps: f64) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let a = g.constant(y.detached());
    let b = g.constant(y_prime.detached());
    let vars = clld_loss_var(&mut g, a, b, alpha, T::of(eps), LossSwitches::default())?;
    Ok(vars.breakdown(&g))
}
