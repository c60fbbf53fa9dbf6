//! In-memory pretrain → fine-tune → evaluate building blocks shared by the
//! commands and the ablation sweep.

use std::collections::BTreeMap;

use clld_core::rng::{stream, Domain};
use clld_core::trainer::{train, StepMetrics, TrainConfig, TrainState};
use clld_core::{Real, Tensor};
use clld_lanes::dataset::plan_dataset;
use clld_lanes::model::{finetune, EncoderInit, HeadConfig, LaneModel};
use clld_lanes::report::{evaluate, EvalConfig, EvalReport};
use clld_lanes::{generate_scene, GeneratorConfig, LaneScene, Scenario};
use rand::seq::index;
use rand::Rng as _;

use crate::error::{CliError, Result};

/// Unlabelled images for pretraining.
#[derive(Clone, Debug)]
pub enum PretrainSource {
    /// A fresh batch of generated scenes every step.
    Generated {
        generator: GeneratorConfig,
        proportions: BTreeMap<Scenario, f64>,
    },
    /// A fixed pool, sampled without replacement within a batch.
    Images(Vec<Tensor<f32>>),
}

impl PretrainSource {
    pub fn batch<T: Real>(&self, config: &TrainConfig, step: u64) -> clld_core::Result<Tensor<T>> {
        let b = config.batch_size;
        let mut rng = stream(config.seed, Domain::Batch, step, 0);
        let images: Vec<Tensor<T>> = match self {
            PretrainSource::Generated { generator, proportions } => {
                let plan = plan_dataset(rng.random(), b, proportions).map_err(core_err)?;
                plan.into_iter()
                    .map(|(sc, s)| generate_scene(s, sc, generator).map(|scene| scene.image.cast()))
                    .collect::<clld_lanes::Result<_>>()
                    .map_err(core_err)?
            }
            PretrainSource::Images(pool) if pool.len() >= b => {
                index::sample(&mut rng, pool.len(), b).iter().map(|i| pool[i].cast()).collect()
            }
            PretrainSource::Images(pool) if !pool.is_empty() => {
                (0..b).map(|_| pool[rng.random_range(0..pool.len())].cast()).collect()
            }
            PretrainSource::Images(_) => {
                return Err(clld_core::Error::Config("pretraining image pool is empty".into()))
            }
        };
        Tensor::stack(&images)
    }
}

fn core_err(e: clld_lanes::Error) -> clld_core::Error {
    match e {
        clld_lanes::Error::Core(inner) => inner,
        other => clld_core::Error::Config(other.to_string()),
    }
}

/// Trains `state` to its configured total, reporting each step.
pub fn run_pretrain<T: Real>(
    state: &mut TrainState<T>,
    source: &PretrainSource,
    on_step: impl FnMut(&StepMetrics, &TrainState<T>) -> clld_core::Result<()>,
) -> Result<Vec<StepMetrics>> {
    let cfg = state.config.clone();
    let total = cfg.total_steps;
    Ok(train(state, total, |step| source.batch(&cfg, step), on_step)?)
}

pub struct DownstreamResult<T> {
    pub model: LaneModel<T>,
    pub losses: Vec<f64>,
    pub report: EvalReport,
}

/// Fine-tunes from `init` on `train_scenes` and scores on `eval_scenes`.
pub fn finetune_and_evaluate<T: Real>(
    init: EncoderInit<T>,
    train_scenes: &[LaneScene],
    eval_scenes: &[LaneScene],
    head: &HeadConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<DownstreamResult<T>> {
    let r = finetune(init, train_scenes, head, head.steps, seed)?;
    let report = evaluate(&r.model, eval_scenes, eval)?;
    Ok(DownstreamResult {
        model: r.model,
        losses: r.losses,
        report,
    })
}

/// Scores for one ablation cell and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// F1 per scenario present in the eval set.
    pub subset_f1: BTreeMap<String, f64>,
    pub final_loss: f64,
}

impl CellScores {
    pub fn from_report(report: &EvalReport, final_loss: f64) -> Self {
        let o = report.overall();
        Self {
            precision: o.precision,
            recall: o.recall,
            f1: o.f1,
            subset_f1: report
                .rows
                .iter()
                .filter(|r| r.subset != "overall")
                .map(|r| (r.subset.clone(), r.f1))
                .collect(),
            final_loss,
        }
    }
}

/// Pretrain with `config`, then fine-tune and evaluate the online encoder.
pub fn pretrain_finetune_evaluate<T: Real>(
    config: &TrainConfig,
    source: &PretrainSource,
    train_scenes: &[LaneScene],
    eval_scenes: &[LaneScene],
    head: &HeadConfig,
    eval: &EvalConfig,
) -> Result<CellScores> {
    let mut state = TrainState::<T>::new(config.clone())?;
    let metrics = run_pretrain(&mut state, source, |_, _| Ok(()))?;
    let final_loss = metrics.last().map_or(f64::NAN, |m| m.loss.l_clld);
    let init = EncoderInit::Pretrained(config.encoder.clone(), state.pair.online);
    let r = finetune_and_evaluate(init, train_scenes, eval_scenes, head, eval, config.seed)?;
    Ok(CellScores::from_report(&r.report, final_loss))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn require_size(scenes: &[LaneScene], size: [usize; 2], what: &str) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.image.shape()[1..] != size) {
        return Err(CliError::Config(format!(
            "{what} images are {:?} but the encoder expects {size:?}",
            &s.image.shape()[1..]
        )));
    }
    Ok(())
}
