//! Command-line front end: dataset synthesis, the two training stages,
//! evaluation, cross-validation, method comparison, gradient checks and
//! single-image inference.

pub mod commands;
pub mod options;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use stereoseg::pipeline::Stage;
use stereoseg::synthgen::SceneFamily;

use commands::{CompareOpts, EvalOpts, GradcheckOpts, InferOpts, LoocvOpts, SynthOpts};
use options::Layered;

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; a previous run's resolved_config.toml reproduces it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Family {
    Routine,
    Knee,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, value_enum)]
        family: Option<Family>,
        #[arg(long)]
        groups: Option<u32>,
        #[arg(long)]
        size: Option<usize>,
        /// Train and test fractions, e.g. `0.8,0.2`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        split: Option<Vec<f64>>,
        /// Add overexposed, blurred and low-texture copies.
        #[arg(long)]
        degrade: bool,
    },
    /// Depth pre-training on stereo pairs.
    Pretrain,
    /// Joint fine-tuning from a pre-trained checkpoint.
    Finetune,
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `train`, `test` or `all`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Leave-one-group-out cross-validation of fine-tuning.
    Loocv {
        /// Held-out groups (default: every labelled group).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<String>>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Wilcoxon comparison of the joint model and its depth_weight = 0
    /// ablation, or of two existing report tables.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        reports: Option<Vec<PathBuf>>,
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<String>>,
    },
    /// Finite-difference gradient checks of every loss term.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Segment one image and predict its disparity.
    Infer {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Parser)]
#[command(name = "stereoseg", version, about = "Multi-task segmentation and self-supervised stereo depth")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Pretrain => "pretrain",
        Command::Finetune => "finetune",
        Command::Eval { .. } => "eval",
        Command::Loocv { .. } => "loocv",
        Command::Compare { .. } => "compare",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Infer { .. } => "infer",
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| stereoseg::Error::Config("--out is required for this command".into()).into())
}

fn dispatch(top: Top) -> Result<()> {
    let Top { common, command } = top;
    let cmd = name(&command);
    let cfg_path = common.config.as_deref();
    let overrides = &common.overrides;
    match command {
        Command::Synth {
            scenes,
            family,
            groups,
            size,
            split,
            degrade,
        } => {
            let layers = Layered::load(cmd, cfg_path, overrides, false)?;
            let mut o: SynthOpts = layers.invocation()?;
            if let Some(v) = scenes {
                o.scenes = v;
            }
            if let Some(f) = family {
                o.family = match f {
                    Family::Routine => SceneFamily::Routine,
                    Family::Knee => SceneFamily::KneeLike,
                };
            }
            if let Some(v) = groups {
                o.groups = v;
            }
            if let Some(v) = size {
                o.size = v;
            }
            if let Some(v) = split {
                o.split = [v[0], v[1]];
            }
            if degrade {
                o.degrade = true;
            }
            if let Some(s) = common.seed {
                o.seed = s;
            }
            commands::synth(&require_out(&common.out)?, o)
        }
        Command::Pretrain | Command::Finetune => {
            let stage = if cmd == "pretrain" { Stage::Pretrain } else { Stage::Finetune };
            let layers = Layered::load(cmd, cfg_path, overrides, true)?;
            let _: commands::TrainOpts = layers.invocation()?;
            let mut cfg = layers.run_config(stage)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            commands::train(stage, &require_out(&common.out)?, cfg)
        }
        Command::Eval { checkpoint, data, split } => {
            let layers = Layered::load(cmd, cfg_path, overrides, false)?;
            let mut o: EvalOpts = layers.invocation()?;
            o.checkpoint = checkpoint.or(o.checkpoint);
            o.data = data.or(o.data);
            if let Some(s) = split {
                o.split = s;
            }
            commands::eval(&require_out(&common.out)?, o)
        }
        Command::Loocv { folds, method } => {
            let layers = Layered::load(cmd, cfg_path, overrides, true)?;
            let mut o: LoocvOpts = layers.invocation()?;
            o.folds = folds.or(o.folds);
            if let Some(m) = method {
                o.method = m;
            }
            let mut cfg = layers.run_config(Stage::Finetune)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            commands::loocv_cmd(&require_out(&common.out)?, cfg, o)
        }
        Command::Compare { reports, folds } => {
            let layers = Layered::load(cmd, cfg_path, overrides, true)?;
            let mut o: CompareOpts = layers.invocation()?;
            o.reports = reports.or(o.reports);
            o.folds = folds.or(o.folds);
            let cfg = if o.reports.is_some() && layers.run.is_empty() {
                None
            } else {
                let mut cfg = layers.run_config(Stage::Finetune)?;
                if let Some(s) = common.seed {
                    cfg.seed = s;
                }
                Some(cfg)
            };
            commands::compare(&require_out(&common.out)?, cfg, o)
        }
        Command::Gradcheck { instances } => {
            let layers = Layered::load(cmd, cfg_path, overrides, false)?;
            let mut o: GradcheckOpts = layers.invocation()?;
            if let Some(n) = instances {
                o.instances = n;
            }
            if let Some(s) = common.seed {
                o.seed = s;
            }
            commands::gradcheck(common.out.as_deref(), o)
        }
        Command::Infer { image, checkpoint } => {
            let layers = Layered::load(cmd, cfg_path, overrides, true)?;
            let mut o: InferOpts = layers.invocation()?;
            o.image = image.or(o.image);
            o.checkpoint = checkpoint.or(o.checkpoint);
            let mut cfg = layers.run_config(Stage::Finetune)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            commands::infer(&require_out(&common.out)?, cfg, o)
        }
    }
}

/// Category tag of a runtime error.
pub fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<stereoseg::Error>())
        .map(|e| e.category())
        .unwrap_or("runtime")
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code: 0 on success, 1 on a runtime failure (reported as
/// `error[category]: message`), 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let top = match Top::try_parse_from(args) {
        Ok(t) => t,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(top) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", category(&e));
            1
        }
    }
}
