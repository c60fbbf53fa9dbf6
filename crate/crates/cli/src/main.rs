use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clld_cli::commands::{self, InitFrom};
use clld_cli::config::load_or_default;
use clld_cli::{CliError, Overrides, Result, RunConfig};

#[derive(Parser)]
#[command(name = "clld", version, about = "Cross-similarity pretraining and lane-detection benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Self-supervised pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        alpha: Option<usize>,
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
    },
    /// Fine-tune a lane model and evaluate it on held-out scenes.
    Finetune {
        #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a saved lane model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Pretrain, fine-tune and evaluate every ablation cell for every seed.
    Ablate {
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn resolve(mut cfg: RunConfig, common: &Common, mut o: Overrides) -> Result<RunConfig> {
    o.seed = common.seed;
    o.out = common.out.clone();
    o.precision = common.precision.as_deref().map(|p| p.parse().expect("validated by clap"));
    cfg = cfg.resolve(&o)?;
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_or_default(cli.common.config.as_deref())?;
    let force = cli.common.force;
    match &cli.command {
        Command::GenData { count } => {
            let cfg = resolve(cfg, &cli.common, Overrides { count: *count, ..Default::default() })?;
            let m = commands::gen_data(&cfg, force)?;
            eprintln!("wrote {} scenes to {}", m.count, cfg.out_dir()?.display());
        }
        Command::Pretrain { resume, steps, alpha, pretrain_data } => {
            set(&mut cfg.data.pretrain, pretrain_data);
            let o = Overrides { steps: *steps, alpha: *alpha, ..Default::default() };
            let cfg = resolve(cfg, &cli.common, o)?;
            let r = commands::pretrain(&cfg, resume.as_deref(), force)?;
            eprintln!("pretrained to step {}: {}", r.final_step, r.final_checkpoint.display());
        }
        Command::Finetune { checkpoint, random_init, train_data, eval_data, steps } => {
            set(&mut cfg.data.train, train_data);
            set(&mut cfg.data.eval, eval_data);
            if let Some(s) = steps {
                cfg.finetune.steps = *s;
            }
            let cfg = resolve(cfg, &cli.common, Overrides::default())?;
            let init = match (checkpoint, random_init) {
                (Some(p), false) => InitFrom::Checkpoint(p.clone()),
                _ => InitFrom::Random,
            };
            let report = commands::finetune(&cfg, &init, force)?;
            print!("{}", report.to_csv());
        }
        Command::Eval { model, eval_data } => {
            set(&mut cfg.data.eval, eval_data);
            let cfg = resolve(cfg, &cli.common, Overrides::default())?;
            let report = commands::eval(&cfg, model, force)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { train_data, eval_data, seeds } => {
            set(&mut cfg.data.train, train_data);
            set(&mut cfg.data.eval, eval_data);
            if let Some(s) = seeds {
                cfg.ablate.seeds = s.clone();
            }
            let cfg = resolve(cfg, &cli.common, Overrides::default())?;
            let table = commands::ablate(&cfg, force)?;
            print!("{}", table.summary_csv());
            if let Some(f) = table.first_failure() {
                return Err(match f.exit_code {
                    2 => CliError::Config(f.message.clone()),
                    4 => CliError::Numeric(f.message.clone()),
                    _ => CliError::Data(f.message.clone()),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clld: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
