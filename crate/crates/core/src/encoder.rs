//! Convolutional encoder, its projector, and the online/target pair.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[H, W]` of the input image.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub kernel_size: usize,
    /// Channels per normalization group.
    pub group_size: usize,
    /// Output channels of the 1×1 projector; 0 keeps the last stage's features.
    pub projector_dim: usize,
    /// 32 or 64.
    pub precision: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64],
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            kernel_size: 3,
            group_size: 8,
            projector_dim: 32,
            precision: 32,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// `(channels, height, width)` of the emitted feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let s = self.total_stride();
        let d = if self.projector_dim > 0 {
            self.projector_dim
        } else {
            self.stage_channels.last().copied().unwrap_or(self.in_channels)
        };
        (d, self.input_size[0] / s, self.input_size[1] / s)
    }

    pub fn validate(&self, alphas: &[usize]) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "{} stage channel entries for {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_strides.contains(&0) || self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("strides must be >= 1 and the kernel side odd".into()));
        }
        for &c in &self.stage_channels {
            if self.group_size == 0 || c % self.group_size != 0 {
                return Err(Error::Config(format!(
                    "group size {} does not divide stage width {c}",
                    self.group_size
                )));
            }
        }
        if !matches!(self.precision, 32 | 64) {
            return Err(Error::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        let s = self.total_stride();
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "total stride {s} must divide the input size {h}x{w}"
            )));
        }
        let (_, oh, ow) = self.output_shape();
        for &a in alphas {
            if a == 0 || oh < a || ow < a || oh % a != 0 || ow % a != 0 {
                return Err(Error::Config(format!(
                    "feature map {oh}x{ow} cannot be tiled by alpha {a}"
                )));
            }
        }
        Ok(())
    }

    /// Shrinks each input side to the largest size whose feature map is a
    /// multiple of `alpha` (e.g. 64 → 48 for stride 8 and `alpha = 3`).
    pub fn resolve_input_for_alpha(&self, alpha: usize) -> Result<[usize; 2]> {
        let s = self.total_stride();
        let side = |v: usize| -> Result<usize> {
            let map = (v / s) / alpha.max(1) * alpha.max(1);
            if map == 0 {
                return Err(Error::Config(format!("input side {v} too small for alpha {alpha}")));
            }
            Ok(map * s)
        };
        Ok([side(self.input_size[0])?, side(self.input_size[1])?])
    }

    pub fn with_input_size(&self, input_size: [usize; 2]) -> Self {
        Self {
            input_size,
            ..self.clone()
        }
    }
}

/// LARS adaptation and weight decay skip biases and normalization affine terms.
pub fn is_excluded_from_adaptation(name: &str) -> bool {
    name.ends_with(".bias") || name.contains(".norm.")
}

/// He-normal convolution weights, unit norm gains, zero biases.
pub fn init_params<T: Real>(config: &EncoderConfig, rng: &mut impl Rng) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    let k = config.kernel_size;
    let mut c_in = config.in_channels;
    for (i, &c_out) in config.stage_channels.iter().enumerate() {
        ps.push(format!("stage{i}.conv.weight"), he_normal([c_out, c_in, k, k], rng));
        ps.push(format!("stage{i}.norm.weight"), Tensor::ones([c_out]));
        ps.push(format!("stage{i}.norm.bias"), Tensor::zeros([c_out]));
        c_in = c_out;
    }
    if config.projector_dim > 0 {
        ps.push(
            "projector.weight",
            he_normal([config.projector_dim, c_in, 1, 1], rng),
        );
        ps.push("projector.bias", Tensor::zeros([config.projector_dim]));
    }
    ps
}

pub(crate) fn he_normal<T: Real>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::of(v * std)
    })
}

/// Records the encoder on `g`. `params` are the handles returned by
/// [`ParamSet::insert_into`] for a set built by [`init_params`].
pub fn encoder_forward_var<T: Real>(
    g: &mut Graph<T>,
    config: &EncoderConfig,
    params: &[Var],
    image: Var,
) -> Result<Var> {
    let expected = [config.in_channels, config.input_size[0], config.input_size[1]];
    if g.shape(image) != expected {
        return Err(Error::Config(format!(
            "image {:?} does not match encoder input {:?}",
            g.shape(image),
            expected
        )));
    }
    let n_expected = 3 * config.stage_channels.len() + if config.projector_dim > 0 { 2 } else { 0 };
    if params.len() != n_expected {
        return Err(Error::Config(format!(
            "encoder expects {n_expected} parameter tensors, got {}",
            params.len()
        )));
    }
    let pad = config.kernel_size / 2;
    let mut x = image;
    for (i, &stride) in config.stage_strides.iter().enumerate() {
        let [w, gamma, beta] = [params[3 * i], params[3 * i + 1], params[3 * i + 2]];
        x = g.conv2d(x, w, stride, pad)?;
        x = g.group_norm(x, gamma, beta, config.group_size, T::of(NORM_EPS))?;
        x = g.relu(x);
    }
    if config.projector_dim > 0 {
        let n = params.len();
        x = g.conv2d(x, params[n - 2], 1, 0)?;
        x = g.add_channel_bias(x, params[n - 1])?;
    }
    Ok(x)
}

/// Untracked forward pass producing the `[d, h, w]` feature map.
pub fn encoder_forward<T: Real>(params: &ParamSet<T>, image: &Tensor<T>, config: &EncoderConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.insert_into(&mut g, false);
    let x = g.constant(image.detached());
    let y = encoder_forward_var(&mut g, config, &vars, x)?;
    Ok(g.value(y).detached())
}

/// Gradient-trained online encoder and its exponential-moving-average target.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub online: ParamSet<T>,
    pub target: ParamSet<T>,
    pub momentum: f64,
}

impl<T: Real> EncoderPair<T> {
    /// Target starts as an exact, untracked copy of the online parameters.
    pub fn new(mut online: ParamSet<T>, momentum: f64) -> Self {
        online.set_requires_grad(true);
        let target = online.detached();
        Self {
            online,
            target,
            momentum,
        }
    }

    /// `target ← m·target + (1 − m)·online` for every parameter.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Contract(format!("momentum {m} outside [0, 1]")));
        }
        if !self.online.same_layout(&self.target) {
            return Err(Error::Contract("online and target layouts differ".into()));
        }
        let (mt, mo) = (T::of(m), T::of(1.0 - m));
        for ((_, t), (_, o)) in self.target.iter_mut().zip(self.online.iter()) {
            for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
                // m = 1 and the fixed point online == target must be exact
                if *tv != ov {
                    *tv = mt * *tv + mo * ov;
                }
            }
        }
        self.momentum = m;
        Ok(())
    }
}

/// Cosine ramp of the EMA coefficient from `m0` at step 0 to 1 at `total_steps`.
pub fn momentum_schedule(step: u64, total_steps: u64, m0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}
