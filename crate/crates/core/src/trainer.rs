//! The pretraining loop: two views per image, online/target forward passes,
//! the summed loss, a LARS step on the online encoder and an EMA step on the target.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_mask, normalize_channels, photometric_jitter, sample_mask};
use crate::encoder::{
    encoder_forward, encoder_forward_var, init_params, is_excluded_from_adaptation, momentum_schedule,
    EncoderConfig, EncoderPair,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{clld_loss_var, LossBreakdown, LossSwitches, DEFAULT_EPS};
use crate::optim::{cosine_lr, default_warmup, Lars, LarsConfig};
use crate::params::ParamSet;
use crate::real::Real;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// Which view the gradient-trained encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRouting {
    #[default]
    MaskedToOnline,
    OriginalToOnline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    /// `None` means five percent of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub weight_decay: f64,
    pub lars_eta: f64,
    pub lars_momentum: f64,
    /// Mask patch side in pixels.
    pub rho: usize,
    pub mask_ratio: f64,
    pub masking_enabled: bool,
    /// Shared photometric jitter applied before the views split.
    pub jitter_strength: f64,
    /// Cross-similarity patch side on the feature map.
    pub alpha: usize,
    pub m0: f64,
    pub loss_switches: LossSwitches,
    pub view_routing: ViewRouting,
    /// Also pass each view through the other encoder and average both directions.
    pub symmetric: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_steps: 2000,
            base_lr: 1.0,
            warmup_steps: None,
            weight_decay: 1e-5,
            lars_eta: 1e-3,
            lars_momentum: 0.9,
            rho: 8,
            mask_ratio: 0.3,
            masking_enabled: true,
            jitter_strength: 0.4,
            alpha: 2,
            m0: 0.99,
            loss_switches: LossSwitches::default(),
            view_routing: ViewRouting::default(),
            symmetric: false,
            seed: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(&[self.alpha])?;
        let [h, w] = self.encoder.input_size;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.rho == 0 || h % self.rho != 0 || w % self.rho != 0 {
            return Err(Error::Config(format!("rho {} must divide the input {h}x{w}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.m0) {
            return Err(Error::Config(format!("m0 {} outside [0, 1]", self.m0)));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.lars_eta <= 0.0 {
            return Err(Error::Config("base_lr and weight_decay must be >= 0, lars_eta > 0".into()));
        }
        if !(0.0..1.0).contains(&self.lars_momentum) {
            return Err(Error::Config(format!("lars_momentum {} outside [0, 1)", self.lars_momentum)));
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or_else(|| default_warmup(self.total_steps))
    }

    pub fn lars_config(&self) -> LarsConfig {
        LarsConfig {
            eta: self.lars_eta,
            weight_decay: self.weight_decay,
            momentum: self.lars_momentum,
            eps: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub m: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,l_cons,l_sim,l_inst,l_clld,lr,m,grad_norm";

impl StepMetrics {
    /// One CSV line in [`METRICS_HEADER`] order. Values print in shortest
    /// round-trip form so equal runs give equal bytes.
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.l_cons, l.l_sim, l.l_inst, l.l_clld, self.lr, self.m, self.grad_norm
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Config(format!("metrics line has {} fields: {line}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad metrics value {s:?}")))
        };
        let step = f[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad step {:?}", f[0])))?;
        Ok(Self {
            step,
            loss: LossBreakdown {
                l_cons: num(f[1])?,
                l_sim: num(f[2])?,
                l_inst: num(f[3])?,
                l_clld: num(f[4])?,
            },
            lr: num(f[5])?,
            m: num(f[6])?,
            grad_norm: num(f[7])?,
        })
    }
}

/// Everything needed to continue a run: parameters, optimizer state and the step counter.
/// Randomness is re-derived from `(config.seed, step)`, so no generator state is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub pair: EncoderPair<T>,
    pub optim: Lars<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Domain::Init, 0, 0);
        let online = init_params::<T>(&config.encoder, &mut rng);
        let pair = EncoderPair::new(online, config.m0);
        let optim = Lars::new(config.lars_config(), &pair.online);
        Ok(Self {
            config,
            pair,
            optim,
            step: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps
    }
}

/// The two views of one image: `(original, masked)`.
pub fn make_views<T: Real>(image: &Tensor<T>, config: &TrainConfig, step: u64, sample: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut rng = stream(config.seed, Domain::Augment, step, sample);
    let base = photometric_jitter(&normalize_channels(image), config.jitter_strength, &mut rng);
    if !config.masking_enabled {
        return Ok((base.clone(), base));
    }
    let [h, w] = config.encoder.input_size;
    let spec = sample_mask(h, w, config.rho, config.mask_ratio, &mut rng)?;
    let masked = apply_mask(&base, &spec, &mut rng)?;
    Ok((base, masked))
}

/// One optimization step on a `[B, C, H, W]` batch.
pub fn pretrain_step<T: Real>(state: &mut TrainState<T>, batch: &Tensor<T>) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    let enc = &cfg.encoder;
    let expected = [cfg.batch_size, enc.in_channels, enc.input_size[0], enc.input_size[1]];
    if batch.shape() != expected {
        return Err(Error::Config(format!(
            "batch {:?} does not match configured {:?}",
            batch.shape(),
            expected
        )));
    }
    let step = state.step;
    let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr, cfg.warmup());
    let m = momentum_schedule(step, cfg.total_steps, cfg.m0);
    let passes = if cfg.symmetric { 2 } else { 1 };
    let weight = T::of(1.0 / (cfg.batch_size * passes) as f64);
    let eps = T::of(DEFAULT_EPS);

    state.pair.online.zero_grad();
    let mut terms = Vec::with_capacity(cfg.batch_size * passes);
    for i in 0..cfg.batch_size {
        let (original, masked) = make_views(&batch.index_first(i)?, &cfg, step, i as u64)?;
        let (to_online, to_target) = match cfg.view_routing {
            ViewRouting::MaskedToOnline => (masked, original),
            ViewRouting::OriginalToOnline => (original, masked),
        };
        let mut routes = vec![(&to_online, &to_target)];
        if cfg.symmetric {
            routes.push((&to_target, &to_online));
        }
        for (online_in, target_in) in routes {
            let target_out = encoder_forward(&state.pair.target, target_in, enc)?;
            let mut g = Graph::new();
            let vars = state.pair.online.insert_into(&mut g, true);
            let x = g.constant(online_in.detached());
            let y = encoder_forward_var(&mut g, enc, &vars, x)?;
            let y_prime = g.constant(target_out);
            let loss = clld_loss_var(&mut g, y, y_prime, cfg.alpha, eps, cfg.loss_switches)?;
            let breakdown = loss.breakdown(&g);
            if !breakdown.l_clld.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: breakdown.l_clld,
                    lr,
                    grad_norm: state.pair.online.grad_norm(),
                });
            }
            terms.push(breakdown);
            let scaled = g.scale(loss.total, weight);
            g.backward(scaled)?;
            state.pair.online.accumulate_from(&g, &vars)?;
        }
    }

    let grad_norm = state.pair.online.grad_norm();
    let loss = LossBreakdown::mean(&terms);
    if !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            loss: loss.l_clld,
            lr,
            grad_norm,
        });
    }
    state.optim.step(&mut state.pair.online, lr, is_excluded_from_adaptation)?;
    state.pair.online.zero_grad();
    state.pair.momentum_update(m)?;
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss,
        lr,
        m,
        grad_norm,
    })
}

/// Runs until `until_step` (capped at `total_steps`), pulling each batch from
/// `batch_for(step)` and reporting every step to `on_step`.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    until_step: u64,
    mut batch_for: impl FnMut(u64) -> Result<Tensor<T>>,
    mut on_step: impl FnMut(&StepMetrics, &TrainState<T>) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let end = until_step.min(state.config.total_steps);
    let mut out = Vec::new();
    while state.step < end {
        let batch = batch_for(state.step)?;
        let metrics = pretrain_step(state, &batch)?;
        on_step(&metrics, state)?;
        out.push(metrics);
    }
    Ok(out)
}

/// Per-channel standard deviation of globally pooled features over `images`.
pub fn pooled_feature_std<T: Real>(params: &ParamSet<T>, config: &EncoderConfig, images: &[Tensor<T>]) -> Result<Vec<f64>> {
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for img in images {
        let y = encoder_forward(params, &normalize_channels(img), config)?;
        let c = y.shape()[0];
        let plane = y.numel() / c;
        pooled.push(
            y.data()
                .chunks(plane)
                .map(|ch| ch.iter().map(|v| v.f64()).sum::<f64>() / plane as f64)
                .collect(),
        );
    }
    let n = pooled.len().max(1) as f64;
    let d = pooled.first().map_or(0, Vec::len);
    Ok((0..d)
        .map(|k| {
            let mean = pooled.iter().map(|p| p[k]).sum::<f64>() / n;
            (pooled.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect())
}

/// Trailing moving average: entry `i` averages `values[i+1-window ..= i]`
/// (fewer at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
