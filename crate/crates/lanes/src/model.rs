//! Lane segmentation model: the pretrained (or freshly initialized) encoder
//! followed by a small decoder head, fine-tuned end to end with per-pixel BCE.
//!
//! Head: 3×3 conv to `hidden` channels on the feature map, bilinear upsampling
//! back to input resolution, ReLU, 3×3 conv to one logit per pixel.

use clld_core::augment::normalize_channels;
use clld_core::encoder::{encoder_forward_var, init_params, EncoderConfig};
use clld_core::graph::{sigmoid, Graph, Var};
use clld_core::optim::{Adam, AdamConfig};
use clld_core::params::ParamSet;
use clld_core::rng::{stream, Domain};
use clld_core::{Real, Tensor};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::render_lane_mask;
use crate::scene::LaneScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Weight of lane pixels in the BCE loss.
    pub pos_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Width of the rendered training masks.
    pub label_width_px: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            pos_weight: 4.0,
            lr: 1e-3,
            batch_size: 8,
            steps: 300,
            label_width_px: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.label_width_px == 0 {
            return Err(Error::Config("hidden, batch_size and label_width_px must be positive".into()));
        }
        if !(self.pos_weight > 0.0 && self.lr > 0.0) {
            return Err(Error::Config("pos_weight and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Where the encoder weights come from.
#[derive(Clone, Debug)]
pub enum EncoderInit<T> {
    Random(EncoderConfig),
    Pretrained(EncoderConfig, ParamSet<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneModel<T> {
    pub encoder_config: EncoderConfig,
    pub encoder: ParamSet<T>,
    pub head: ParamSet<T>,
    pub head_config: HeadConfig,
}

fn normal_tensor<T: Real>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
}

fn init_head<T: Real>(d: usize, cfg: &HeadConfig, seed: u64) -> ParamSet<T> {
    let mut rng = stream(seed, Domain::Finetune, u64::MAX, 0);
    let mut ps = ParamSet::new();
    ps.push("head.conv1.weight", normal_tensor([cfg.hidden, d, 3, 3], &mut rng));
    ps.push("head.conv1.bias", Tensor::zeros([cfg.hidden]));
    ps.push("head.conv2.weight", normal_tensor([1, cfg.hidden, 3, 3], &mut rng));
    ps.push("head.conv2.bias", Tensor::zeros([1]));
    ps
}

impl<T: Real> LaneModel<T> {
    pub fn new(init: EncoderInit<T>, head_config: HeadConfig, seed: u64) -> Result<Self> {
        head_config.validate()?;
        let (encoder_config, encoder) = match init {
            EncoderInit::Random(cfg) => {
                let ps = init_params(&cfg, &mut stream(seed, Domain::Finetune, u64::MAX - 1, 0));
                (cfg, ps)
            }
            EncoderInit::Pretrained(cfg, ps) => {
                let reference = init_params::<T>(&cfg, &mut stream(0, Domain::Init, 0, 0));
                if !reference.same_layout(&ps) {
                    return Err(Error::Config("pretrained parameters do not match the encoder config".into()));
                }
                (cfg, ps.detached())
            }
        };
        encoder_config.validate(&[])?;
        let d = encoder_config.output_shape().0;
        let head = init_head(d, &head_config, seed);
        Ok(Self {
            encoder_config,
            encoder,
            head,
            head_config,
        })
    }

    fn forward(&self, g: &mut Graph<T>, enc: &[Var], head: &[Var], image: &Tensor<T>) -> Result<Var> {
        let x = g.constant(normalize_channels(image));
        let y = encoder_forward_var(g, &self.encoder_config, enc, x)?;
        let z = g.conv2d(y, head[0], 1, 1)?;
        let z = g.add_channel_bias(z, head[1])?;
        let z = g.upsample_bilinear(z, self.encoder_config.total_stride())?;
        let z = g.relu(z);
        let z = g.conv2d(z, head[2], 1, 1)?;
        Ok(g.add_channel_bias(z, head[3])?)
    }

    /// Per-pixel lane probability `[H, W]`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let enc = self.encoder.insert_into(&mut g, false);
        let head = self.head.insert_into(&mut g, false);
        let logits = self.forward(&mut g, &enc, &head, image)?;
        let [h, w] = self.encoder_config.input_size;
        let probs = g.value(logits).data().iter().map(|&z| sigmoid(z).f64() as f32).collect();
        Ok(Tensor::new([h, w], probs)?)
    }

    fn check_scene(&self, scene: &LaneScene) -> Result<()> {
        let [h, w] = self.encoder_config.input_size;
        let want = [self.encoder_config.in_channels, h, w];
        if scene.image.shape() != want {
            return Err(Error::Config(format!(
                "scene image {:?} does not match encoder input {want:?}",
                scene.image.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredModel {
    format: u32,
    encoder_config: EncoderConfig,
    head_config: HeadConfig,
    encoder: Vec<StoredArray>,
    head: Vec<StoredArray>,
}

const MODEL_FORMAT: u32 = 1;

fn store<T: Real>(ps: &ParamSet<T>) -> Vec<StoredArray> {
    ps.iter()
        .map(|(name, t)| StoredArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.f64()).collect(),
        })
        .collect()
}

fn restore<T: Real>(into: &mut ParamSet<T>, stored: &[StoredArray]) -> Result<()> {
    if stored.len() != into.len() {
        return Err(Error::Data(format!("model file has {} arrays, expected {}", stored.len(), into.len())));
    }
    for ((name, t), a) in into.iter_mut().zip(stored) {
        if a.name != name || a.shape != t.shape() || a.data.len() != t.numel() {
            return Err(Error::Data(format!("model array {} does not match {name} {:?}", a.name, t.shape())));
        }
        for (dst, &v) in t.data_mut().iter_mut().zip(&a.data) {
            *dst = T::of(v);
        }
    }
    Ok(())
}

impl<T: Real> LaneModel<T> {
    /// JSON with every parameter value written exactly.
    pub fn to_json(&self) -> Result<String> {
        let m = StoredModel {
            format: MODEL_FORMAT,
            encoder_config: self.encoder_config.clone(),
            head_config: self.head_config.clone(),
            encoder: store(&self.encoder),
            head: store(&self.head),
        };
        serde_json::to_string(&m).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: StoredModel = serde_json::from_str(text).map_err(|e| Error::Data(format!("model file: {e}")))?;
        if m.format != MODEL_FORMAT {
            return Err(Error::Data(format!("model format {} (expected {MODEL_FORMAT})", m.format)));
        }
        let mut model = LaneModel::new(EncoderInit::Random(m.encoder_config), m.head_config, 0)?;
        restore(&mut model.encoder, &m.encoder)?;
        restore(&mut model.head, &m.head)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(Error::io(path))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(Error::io(path))?)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult<T> {
    pub model: LaneModel<T>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Trains encoder and head together with Adam on randomly drawn batches.
pub fn finetune<T: Real>(
    init: EncoderInit<T>,
    scenes: &[LaneScene],
    head_config: &HeadConfig,
    steps: u64,
    seed: u64,
) -> Result<FinetuneResult<T>> {
    let mut model = LaneModel::new(init, head_config.clone(), seed)?;
    for s in scenes {
        model.check_scene(s)?;
    }
    if steps > 0 && scenes.is_empty() {
        return Err(Error::Data("no labelled scenes to fine-tune on".into()));
    }
    let [h, w] = model.encoder_config.input_size;
    let labels: Vec<Tensor<T>> = scenes
        .iter()
        .map(|s| render_lane_mask(&s.lanes, head_config.label_width_px, (h, w)).cast::<T>())
        .collect();
    let images: Vec<Tensor<T>> = scenes.iter().map(|s| s.image.cast::<T>()).collect();
    model.encoder.set_requires_grad(true);
    model.head.set_requires_grad(true);
    let adam_cfg = AdamConfig {
        lr: head_config.lr,
        ..Default::default()
    };
    let mut enc_opt = Adam::new(adam_cfg, &model.encoder);
    let mut head_opt = Adam::new(adam_cfg, &model.head);
    let b = head_config.batch_size.min(scenes.len().max(1));
    let weight = T::of(1.0 / b as f64);
    let pos_weight = T::of(head_config.pos_weight);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut rng = stream(seed, Domain::Finetune, step, 0);
        let picks = index::sample(&mut rng, scenes.len(), b);
        model.encoder.zero_grad();
        model.head.zero_grad();
        let mut total = 0.0;
        for i in picks.iter() {
            let mut g = Graph::new();
            let enc = model.encoder.insert_into(&mut g, true);
            let head = model.head.insert_into(&mut g, true);
            let logits = model.forward(&mut g, &enc, &head, &images[i])?;
            let loss = g.bce_with_logits(logits, &labels[i], pos_weight)?;
            let value = g.value(loss).item()?.f64();
            if !value.is_finite() {
                return Err(clld_core::Error::NonFinite(format!("fine-tune loss at step {step}")).into());
            }
            total += value;
            let scaled = g.scale(loss, weight);
            g.backward(scaled)?;
            model.encoder.accumulate_from(&g, &enc)?;
            model.head.accumulate_from(&g, &head)?;
        }
        enc_opt.step(&mut model.encoder)?;
        head_opt.step(&mut model.head)?;
        losses.push(total / b as f64);
    }
    model.encoder.set_requires_grad(false);
    model.head.set_requires_grad(false);
    Ok(FinetuneResult { model, losses })
}
