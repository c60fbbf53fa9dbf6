//! LARS with momentum, the warmup-cosine learning-rate schedule, and Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;

/// Layer-wise trust ratio `η‖w‖ / (‖g‖ + wd‖w‖ + eps)`.
///
/// A zero weight norm gives 0, as does a zero denominator (the update
/// direction `g + wd·w` is then zero as well).
pub fn trust_ratio(w_norm: f64, g_norm: f64, weight_decay: f64, eta: f64, eps: f64) -> f64 {
    let den = g_norm + weight_decay * w_norm + eps;
    if w_norm == 0.0 || den == 0.0 {
        0.0
    } else {
        eta * w_norm / den
    }
}

fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LarsConfig {
    pub eta: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            weight_decay: 1e-5,
            momentum: 0.9,
            eps: 0.0,
        }
    }
}

/// Scaled update direction for one tensor: `τ·(g + wd·w)`, or plain `g` when excluded.
fn lars_direction<T: Real>(w: &[T], g: &[T], wd: f64, eta: f64, eps: f64, excluded: bool) -> Vec<T> {
    if excluded {
        return g.to_vec();
    }
    let tau = T::of(trust_ratio(norm(w), norm(g), wd, eta, eps));
    let wd = T::of(wd);
    w.iter().zip(g).map(|(&w, &g)| tau * (g + wd * w)).collect()
}

/// One momentum-free LARS update over `params` with externally supplied gradients.
pub fn lars_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    lr: f64,
    weight_decay: f64,
    eta: f64,
    exclusions: impl Fn(&str) -> bool,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let lr_t = T::of(lr);
    for ((name, w), g) in params.iter_mut().zip(grads) {
        if g.len() != w.numel() {
            return Err(Error::Contract(format!("gradient length mismatch for {name}")));
        }
        let d = lars_direction(w.data(), g, weight_decay, eta, 0.0, exclusions(name));
        for (w, d) in w.data_mut().iter_mut().zip(d) {
            *w -= lr_t * d;
        }
    }
    Ok(())
}

/// LARS with heavy-ball momentum: `v ← μ·v + τ·(g + wd·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lars<T> {
    pub config: LarsConfig,
    /// One velocity buffer per parameter, in parameter order.
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> Lars<T> {
    pub fn new(config: LarsConfig, params: &ParamSet<T>) -> Self {
        let velocity = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self { config, velocity }
    }

    /// Applies one update using the gradients stored on `params`. Parameters
    /// without a gradient buffer are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64, exclusions: impl Fn(&str) -> bool) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Contract(format!("negative learning rate {lr}")));
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        let c = self.config;
        let (mu, lr_t) = (T::of(c.momentum), T::of(lr));
        for ((name, w), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = w.grad() else { continue };
            let excluded = exclusions(name);
            let wd = if excluded { 0.0 } else { c.weight_decay };
            let d = lars_direction(w.data(), g, wd, c.eta, c.eps, excluded);
            for ((w, v), d) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(d) {
                *v = mu * *v + d;
                *w -= lr_t * *v;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Five percent of the run, rounded down.
pub fn default_warmup(total_steps: u64) -> u64 {
    total_steps / 20
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((_, w), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = w.grad().map(<[T]>::to_vec) else { continue };
            for (((w, m), v), g) in w.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64, g: f64, name: &str) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut t = Tensor::full([1], w).with_requires_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        ps.push(name, t);
        ps
    }

    #[test]
    fn hand_case_single_weight() {
        assert_eq!(trust_ratio(1.0, 1.0, 0.0, 1e-3, 0.0), 1e-3);
        let mut ps = single(1.0, 1.0, "w");
        lars_step(&mut ps, &[vec![1.0]], 1.0, 0.0, 1e-3, |_| false).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 0.999);

        let mut ps = single(1.0, 1.0, "w");
        let cfg = LarsConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Lars::new(cfg, &ps);
        opt.step(&mut ps, 1.0, |_| false).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 0.999);
    }

    #[test]
    fn zero_lr_and_zero_weights() {
        let mut ps = single(0.7, 3.0, "w");
        let mut opt = Lars::new(LarsConfig::default(), &ps);
        opt.step(&mut ps, 0.0, |_| false).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 0.7);

        let mut ps = single(0.0, 3.0, "w");
        lars_step(&mut ps, &[vec![3.0]], 1.0, 1e-5, 1e-3, |_| false).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn excluded_parameters_take_plain_sgd() {
        let mut ps = single(2.0, 0.5, "stage0.norm.bias");
        lars_step(&mut ps, &[vec![0.5]], 0.1, 0.1, 1e-3, |n| n.ends_with(".bias")).unwrap();
        assert_eq!(ps.get("stage0.norm.bias").unwrap().data()[0], 2.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = single(1.0, 1.0, "b");
        let mut opt = Lars::new(LarsConfig::default(), &ps);
        opt.step(&mut ps, 0.1, |_| true).unwrap();
        opt.step(&mut ps, 0.1, |_| true).unwrap();
        // v1 = 1, v2 = 0.9 + 1
        let expect = 1.0 - 0.1 * 1.0 - 0.1 * 1.9;
        assert!((ps.get("b").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_points() {
        let (total, warm) = (100, 10);
        assert_eq!(cosine_lr(0, total, 1.0, warm), 0.0);
        assert_eq!(cosine_lr(5, total, 1.0, warm), 0.5);
        assert_eq!(cosine_lr(warm, total, 1.0, warm), 1.0);
        assert_eq!(cosine_lr(total, total, 1.0, warm), 0.0);
        assert!((cosine_lr(55, total, 1.0, warm) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_lr(0, total, 1.0, 0), 1.0);
        assert_eq!(default_warmup(2000), 100);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = single(1.0, 4.0, "w");
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.step(&mut ps).unwrap();
        assert!((ps.get("w").unwrap().data()[0] - (1.0 - 1e-2)).abs() < 1e-9);
    }
}
