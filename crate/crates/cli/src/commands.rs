//! The subcommands. Each writes only inside its output directory, always
//! including the resolved config it ran with.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clld_core::checkpoint::{read_checkpoint, sha256_hex, Checkpoint};
use clld_core::trainer::{StepMetrics, TrainState, METRICS_HEADER};
use clld_core::Real;
use clld_lanes::dataset::{generate_dataset, load_dataset, plan_dataset, scenario_counts, scene_file, write_dataset};
use clld_lanes::dataset::{DatasetManifest, SceneEntry, MANIFEST_FORMAT};
use clld_lanes::model::{EncoderInit, LaneModel};
use clld_lanes::report::{evaluate, EvalReport};
use clld_lanes::LaneScene;

use crate::config::{AblationCell, RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{CliError, Result};
use crate::pipeline::{finetune_and_evaluate, median, pretrain_finetune_evaluate, require_size, CellScores, PretrainSource};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const ABLATION_TABLE: &str = "ablation.csv";
pub const ABLATION_SUMMARY: &str = "ablation_summary.csv";
pub const RANDOM_INIT_ID: &str = "random-init";

pub fn checkpoint_file(step: u64) -> String {
    format!("step_{step}.ckpt")
}

/// Creates `dir`, refusing a non-empty one unless `force` (which clears it).
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(CliError::io(dir))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(CliError::io(path))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let text = cfg.to_toml()?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

fn require_dir<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what} dataset: set [data].{what} or pass the flag")))?;
    if !p.is_dir() {
        return Err(CliError::Data(format!("{what} dataset {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_scenes(p: &Path) -> Result<Vec<LaneScene>> {
    Ok(load_dataset(p)?.1)
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<DatasetManifest> {
    let out = cfg.out_dir()?;
    prepare_out(out, force)?;
    let digest = write_resolved(cfg, out)?;
    let g = &cfg.gen_data;
    let plan = plan_dataset(cfg.seed, g.count, &g.proportions)?;
    let scenes = generate_dataset(cfg.seed, g.count, &g.proportions, &cfg.generator)?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT,
        seed: cfg.seed,
        count: g.count,
        config_digest: digest,
        generator: cfg.generator.clone(),
        proportions: g.proportions.clone(),
        counts: scenario_counts(g.count, &g.proportions)?,
        scenes: plan
            .iter()
            .enumerate()
            .map(|(i, &(scenario, seed))| SceneEntry {
                file: scene_file(i),
                scenario,
                seed,
            })
            .collect(),
    };
    write_dataset(out, &scenes, &manifest)?;
    Ok(manifest)
}

pub struct PretrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
    pub final_step: u64,
}

fn metrics_preamble(cfg: &RunConfig, digest: &str) -> String {
    let e = &cfg.pretrain.encoder;
    format!(
        "# config_digest={digest} alpha={} input={}x{} precision={}\n{METRICS_HEADER}\n",
        cfg.pretrain.alpha, e.input_size[0], e.input_size[1], e.precision
    )
}

/// Lines of an existing log up to (not including) `step`, or a fresh preamble.
fn resumed_log(path: &Path, step: u64, preamble: &str) -> Result<String> {
    let Ok(f) = File::open(path) else {
        return Ok(preamble.to_string());
    };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(CliError::io(path))?;
        let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) => s < step,
            None => true,
        };
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>, force: bool) -> Result<PretrainOutcome> {
    match cfg.precision() {
        64 => pretrain_typed::<f64>(cfg, resume, force),
        _ => pretrain_typed::<f32>(cfg, resume, force),
    }
}

fn pretrain_typed<T: Real>(cfg: &RunConfig, resume: Option<&Path>, force: bool) -> Result<PretrainOutcome> {
    let out = cfg.out_dir()?;
    let mut state = match resume {
        Some(ckpt) => {
            let c = read_checkpoint(ckpt)?;
            let mut saved = c.config()?;
            saved.total_steps = cfg.pretrain.total_steps;
            if saved != cfg.pretrain {
                return Err(CliError::Config(format!(
                    "{} was trained with a different pretraining config",
                    ckpt.display()
                )));
            }
            std::fs::create_dir_all(out).map_err(CliError::io(out))?;
            let mut s = c.into_state::<T>()?;
            s.config = saved;
            s
        }
        None => {
            prepare_out(out, force)?;
            TrainState::new(cfg.pretrain.clone())?
        }
    };
    let digest = write_resolved(cfg, out)?;
    let source = match &cfg.data.pretrain {
        Some(dir) => {
            let scenes = load_scenes(require_dir(&Some(dir.clone()), "pretrain")?)?;
            require_size(&scenes, cfg.pretrain.encoder.input_size, "pretraining")?;
            PretrainSource::Images(scenes.into_iter().map(|s| s.image).collect())
        }
        None => PretrainSource::Generated {
            generator: cfg.pretrain_generator(),
            proportions: cfg.gen_data.proportions.clone(),
        },
    };

    let log_path = out.join(METRICS_FILE);
    let head = resumed_log(&log_path, state.step, &metrics_preamble(cfg, &digest))?;
    let mut log = BufWriter::new(File::create(&log_path).map_err(CliError::io(&log_path))?);
    log.write_all(head.as_bytes()).map_err(CliError::io(&log_path))?;
    let every = cfg.pretrain.checkpoint_every;
    let save = |state: &TrainState<T>, path: &Path| -> clld_core::Result<()> {
        let bytes = Checkpoint::from_state(state)?.with_config_digest(&digest)?.to_bytes();
        std::fs::write(path, bytes).map_err(clld_core::Error::from)
    };
    let result = crate::pipeline::run_pretrain(&mut state, &source, |m, st| {
        writeln!(log, "{}", m.csv_line())?;
        if every > 0 && st.step % every == 0 && !st.is_finished() {
            log.flush()?;
            save(st, &out.join(checkpoint_file(st.step)))?;
        }
        Ok(())
    });
    log.flush().map_err(CliError::io(&log_path))?;
    let metrics = result?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save(&state, &final_checkpoint)?;
    Ok(PretrainOutcome {
        metrics,
        final_checkpoint,
        final_step: state.step,
    })
}

/// Encoder weights for fine-tuning.
#[derive(Clone, Debug)]
pub enum InitFrom {
    Checkpoint(PathBuf),
    Random,
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    write_file(&out.join(REPORT_TEXT), report.to_key_value())?;
    write_file(&out.join(REPORT_CSV), report.to_csv())
}

pub fn finetune(cfg: &RunConfig, init: &InitFrom, force: bool) -> Result<EvalReport> {
    match cfg.precision() {
        64 => finetune_typed::<f64>(cfg, init, force),
        _ => finetune_typed::<f32>(cfg, init, force),
    }
}

fn finetune_typed<T: Real>(cfg: &RunConfig, init: &InitFrom, force: bool) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let train_dir = require_dir(&cfg.data.train, "train")?;
    let eval_dir = require_dir(&cfg.data.eval, "eval")?;
    let (encoder_init, checkpoint_id) = match init {
        InitFrom::Checkpoint(p) => {
            let bytes = std::fs::read(p).map_err(CliError::io(p))?;
            let c = Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let (ec, ps) = c.online_encoder::<T>()?;
            (EncoderInit::Pretrained(ec, ps), sha256_hex(&bytes))
        }
        InitFrom::Random => (EncoderInit::Random(cfg.pretrain.encoder.clone()), RANDOM_INIT_ID.to_string()),
    };
    let size = match &encoder_init {
        EncoderInit::Random(ec) | EncoderInit::Pretrained(ec, _) => ec.input_size,
    };
    let train_scenes = load_scenes(train_dir)?;
    let eval_scenes = load_scenes(eval_dir)?;
    require_size(&train_scenes, size, "train")?;
    require_size(&eval_scenes, size, "eval")?;
    prepare_out(out, force)?;
    let digest = write_resolved(cfg, out)?;

    let r = finetune_and_evaluate(encoder_init, &train_scenes, &eval_scenes, &cfg.finetune, &cfg.eval, cfg.seed)?;
    r.model.save(&out.join(MODEL_FILE))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
    }
    write_file(&out.join(FINETUNE_LOG), log)?;
    let report = EvalReport {
        config_digest: digest,
        checkpoint_id,
        ..r.report
    };
    write_report(&report, out)?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig, model_path: &Path, force: bool) -> Result<EvalReport> {
    match cfg.precision() {
        64 => eval_typed::<f64>(cfg, model_path, force),
        _ => eval_typed::<f32>(cfg, model_path, force),
    }
}

fn eval_typed<T: Real>(cfg: &RunConfig, model_path: &Path, force: bool) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let eval_dir = require_dir(&cfg.data.eval, "eval")?;
    let bytes = std::fs::read(model_path).map_err(CliError::io(model_path))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Data(format!("{} is not a model file", model_path.display())))?;
    let model = LaneModel::<T>::from_json(&text)?;
    let scenes = load_scenes(eval_dir)?;
    require_size(&scenes, model.encoder_config.input_size, "eval")?;
    prepare_out(out, force)?;
    let digest = write_resolved(cfg, out)?;
    let report = EvalReport {
        config_digest: digest,
        checkpoint_id: sha256_hex(&bytes),
        ..evaluate(&model, &scenes, &cfg.eval)?
    };
    write_report(&report, out)?;
    Ok(report)
}

/// One ablation cell run with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub outcome: std::result::Result<CellScores, CellFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub exit_code: i32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Scenario subsets reported per row, in column order.
    pub subsets: Vec<String>,
}

impl AblationTable {
    pub fn first_failure(&self) -> Option<&CellFailure> {
        self.rows.iter().find_map(|r| r.outcome.as_ref().err())
    }

    pub fn scores(&self, cell: &str) -> Vec<&CellScores> {
        self.rows
            .iter()
            .filter(|r| r.cell.name == cell)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,seed,use_sim,use_cons,masking,status,precision,recall,f1");
        for sub in &self.subsets {
            let _ = write!(s, ",f1_{sub}");
        }
        s.push_str(",final_pretrain_loss\n");
        for r in &self.rows {
            let c = &r.cell;
            let _ = write!(s, "{},{},{},{},{}", c.name, r.seed, c.use_sim, c.use_cons, c.masking);
            match &r.outcome {
                Ok(sc) => {
                    let _ = write!(s, ",ok,{},{},{}", sc.precision, sc.recall, sc.f1);
                    for sub in &self.subsets {
                        let _ = match sc.subset_f1.get(sub) {
                            Some(v) => write!(s, ",{v}"),
                            None => write!(s, ","),
                        };
                    }
                    let _ = writeln!(s, ",{}", sc.final_loss);
                }
                Err(f) => {
                    let msg = f.message.replace([',', '\n'], " ");
                    let _ = writeln!(s, ",failed: {msg}{}", ",".repeat(4 + self.subsets.len()));
                }
            }
        }
        s
    }

    /// Per-cell medians over the seeds that completed.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("cell,use_sim,use_cons,masking,completed,median_precision,median_recall,median_f1");
        for sub in &self.subsets {
            let _ = write!(s, ",median_f1_{sub}");
        }
        s.push('\n');
        let mut seen: Vec<&AblationCell> = Vec::new();
        for r in &self.rows {
            if seen.iter().any(|c| c.name == r.cell.name) {
                continue;
            }
            seen.push(&r.cell);
            let sc = self.scores(&r.cell.name);
            let med = |f: &dyn Fn(&CellScores) -> f64| median(&sc.iter().map(|x| f(x)).collect::<Vec<_>>());
            let c = &r.cell;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.name,
                c.use_sim,
                c.use_cons,
                c.masking,
                sc.len(),
                med(&|x| x.precision),
                med(&|x| x.recall),
                med(&|x| x.f1)
            );
            for sub in &self.subsets {
                let _ = write!(s, ",{}", med(&|x| x.subset_f1.get(sub).copied().unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every cell for every seed. Failed cells are recorded and the sweep
/// continues; the table is rewritten after each run.
pub fn ablate(cfg: &RunConfig, force: bool) -> Result<AblationTable> {
    let out = cfg.out_dir()?;
    let train_scenes = load_scenes(require_dir(&cfg.data.train, "train")?)?;
    let eval_scenes = load_scenes(require_dir(&cfg.data.eval, "eval")?)?;
    let size = cfg.pretrain.encoder.input_size;
    require_size(&train_scenes, size, "train")?;
    require_size(&eval_scenes, size, "eval")?;
    let pool = match &cfg.data.pretrain {
        Some(dir) => {
            let scenes = load_scenes(require_dir(&Some(dir.clone()), "pretrain")?)?;
            require_size(&scenes, size, "pretraining")?;
            Some(scenes.into_iter().map(|s| s.image).collect::<Vec<_>>())
        }
        None => None,
    };
    prepare_out(out, force)?;
    write_resolved(cfg, out)?;

    let mut head = cfg.finetune.clone();
    if let Some(s) = cfg.ablate.finetune_steps {
        head.steps = s;
    }
    let mut subsets: Vec<String> = eval_scenes.iter().map(|s| s.scenario.name().to_string()).collect();
    subsets.sort_by_key(|n| n.parse::<clld_lanes::Scenario>().ok());
    subsets.dedup();
    let mut table = AblationTable { rows: Vec::new(), subsets };
    for cell in &cfg.ablate.cells {
        for &seed in &cfg.ablate.seeds {
            let mut tc = cell.apply(&cfg.pretrain);
            tc.seed = seed;
            if let Some(s) = cfg.ablate.pretrain_steps {
                tc.total_steps = s;
            }
            let source = match &pool {
                Some(images) => PretrainSource::Images(images.clone()),
                None => PretrainSource::Generated {
                    generator: cfg.pretrain_generator(),
                    proportions: cfg.gen_data.proportions.clone(),
                },
            };
            let run = match cfg.precision() {
                64 => pretrain_finetune_evaluate::<f64>(&tc, &source, &train_scenes, &eval_scenes, &head, &cfg.eval),
                _ => pretrain_finetune_evaluate::<f32>(&tc, &source, &train_scenes, &eval_scenes, &head, &cfg.eval),
            };
            table.rows.push(AblationRow {
                cell: cell.clone(),
                seed,
                outcome: run.map_err(|e| CellFailure {
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                }),
            });
            write_file(&out.join(ABLATION_TABLE), table.to_csv())?;
            write_file(&out.join(ABLATION_SUMMARY), table.summary_csv())?;
        }
    }
    Ok(table)
}
