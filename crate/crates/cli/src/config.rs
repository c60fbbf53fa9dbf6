//! Run configuration: one TOML file with a section per command, flag
//! overrides on top, and a canonical resolved form whose SHA-256 is stamped
//! into every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clld_core::checkpoint::sha256_hex;
use clld_core::losses::LossSwitches;
use clld_core::trainer::TrainConfig;
use clld_lanes::dataset::default_proportions;
use clld_lanes::model::HeadConfig;
use clld_lanes::report::EvalConfig;
use clld_lanes::{GeneratorConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataSection {
    pub count: usize,
    pub proportions: BTreeMap<Scenario, f64>,
}

impl Default for GenDataSection {
    fn default() -> Self {
        Self {
            count: 1000,
            proportions: default_proportions(),
        }
    }
}

/// Dataset directories. Pretraining draws fresh generated scenes when
/// `pretrain` is unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub pretrain: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub use_sim: bool,
    pub use_cons: bool,
    pub masking: bool,
}

impl AblationCell {
    fn new(name: &str, use_sim: bool, use_cons: bool, masking: bool) -> Self {
        Self {
            name: name.into(),
            use_sim,
            use_cons,
            masking,
        }
    }

    /// The pretraining config for this cell; the instance term keeps its base setting.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            loss_switches: LossSwitches {
                use_sim: self.use_sim,
                use_cons: self.use_cons,
                ..base.loss_switches
            },
            masking_enabled: self.masking,
            ..base.clone()
        }
    }
}

/// {sim only, cons only, both} × {masking on, off}.
pub fn default_cells() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for masking in [true, false] {
        let tag = if masking { "mask" } else { "nomask" };
        cells.push(AblationCell::new(&format!("sim_{tag}"), true, false, masking));
        cells.push(AblationCell::new(&format!("cons_{tag}"), false, true, masking));
        cells.push(AblationCell::new(&format!("both_{tag}"), true, true, masking));
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    /// Overrides `pretrain.total_steps` for every cell.
    pub pretrain_steps: Option<u64>,
    /// Overrides `finetune.steps` for every cell.
    pub finetune_steps: Option<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            cells: default_cells(),
            pretrain_steps: None,
            finetune_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every command; `pretrain.seed` is overwritten with it on resolution.
    pub seed: u64,
    /// Not part of the resolved config, so runs differing only in where they
    /// write share a digest.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub generator: GeneratorConfig,
    #[serde(rename = "gen-data")]
    pub gen_data: GenDataSection,
    pub data: DataSection,
    pub pretrain: TrainConfig,
    pub finetune: HeadConfig,
    pub eval: EvalConfig,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            generator: GeneratorConfig::default(),
            gen_data: GenDataSection::default(),
            data: DataSection::default(),
            pretrain: TrainConfig::default(),
            finetune: HeadConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Flag values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<u32>,
    pub steps: Option<u64>,
    pub alpha: Option<usize>,
    pub count: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies overrides, then the derived settings: the global seed reaches
    /// the trainer and the encoder input is snapped to the alpha rule.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(p) = o.precision {
            self.pretrain.encoder.precision = p;
        }
        if let Some(s) = o.steps {
            self.pretrain.total_steps = s;
        }
        if let Some(a) = o.alpha {
            self.pretrain.alpha = a;
        }
        if let Some(c) = o.count {
            self.gen_data.count = c;
        }
        self.pretrain.seed = self.seed;
        let size = self.pretrain.encoder.resolve_input_for_alpha(self.pretrain.alpha)?;
        self.pretrain.encoder = self.pretrain.encoder.with_input_size(size);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.pretrain.encoder.precision, 32 | 64) {
            return Err(CliError::Config(format!(
                "precision must be 32 or 64, got {}",
                self.pretrain.encoder.precision
            )));
        }
        self.pretrain.validate()?;
        self.generator.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        clld_lanes::dataset::scenario_counts(0, &self.gen_data.proportions)?;
        let mut names: Vec<&str> = self.ablate.cells.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("ablation cell names must be unique".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("serializing config: {e}")))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn precision(&self) -> u32 {
        self.pretrain.encoder.precision
    }

    /// Output directory from the flag or the file.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }

    /// Generator settings for scenes fed to the pretraining encoder.
    pub fn pretrain_generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.pretrain.encoder.input_size,
            ..self.generator.clone()
        }
    }
}

pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}
