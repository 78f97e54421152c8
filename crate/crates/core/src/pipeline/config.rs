//! Run configuration: TOML schema, stage defaults and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use crate::data::{DepthAugConfig, SegAugConfig};
use crate::error::{Error, Result};
use crate::losses::{DepthLossWeights, SegLossWeights};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Dataset roots. `pre` feeds pre-training; `dep` and `seg` feed the two
/// halves of each fine-tuning step (they may point at the same root).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dep: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Multiplier of the depth loss during fine-tuning; 0 gives pure
    /// segmentation training.
    #[serde(default = "one")]
    pub depth_weight: f64,
    /// Save a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: u32,
    /// Stop after this many optimisation steps, whatever the epoch count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Pre-trained checkpoint whose encoder starts fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub depth: DepthAugConfig,
    pub seg: SegAugConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Worker threads for data-parallel work; 0 uses the default pool.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub data: DataPaths,
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub depth_loss: DepthLossWeights,
    #[serde(default)]
    pub seg_loss: SegLossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl RunConfig {
    /// Defaults of a stage.
    pub fn for_stage(stage: Stage) -> RunConfig {
        let train = match stage {
            Stage::Pretrain => TrainConfig {
                epochs: 200,
                batch_size: 32,
                lr_initial: 1e-4,
                lr_schedule: LrSchedule::StepHalving { milestones: vec![80, 120] },
                weight_decay: 0.0,
                grad_clip: None,
                depth_weight: 1.0,
                checkpoint_every: 10,
                max_steps: None,
                init_checkpoint: None,
            },
            Stage::Finetune => TrainConfig {
                epochs: 120,
                batch_size: 12,
                lr_initial: 1e-4,
                lr_schedule: LrSchedule::Polynomial { gamma: 0.9 },
                weight_decay: 1e-5,
                grad_clip: None,
                depth_weight: 1.0,
                checkpoint_every: 10,
                max_steps: None,
                init_checkpoint: None,
            },
        };
        RunConfig {
            stage,
            seed: 0,
            threads: 0,
            data: DataPaths::default(),
            train,
            model: ModelConfig::default(),
            depth_loss: DepthLossWeights::default(),
            seg_loss: SegLossWeights::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Parses TOML text on top of the defaults of the stage it names, then
    /// applies `key=value` overrides (dotted keys, TOML values; bare words
    /// are taken as strings). Unknown keys are rejected.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let stage = match user.get("stage") {
            Some(v) => Stage::deserialize(v.clone()).map_err(|e| Error::Config(format!("stage: {e}")))?,
            None => return Err(Error::Config("missing key `stage`".into())),
        };
        let mut merged = toml::Table::try_from(RunConfig::for_stage(stage)).map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, overrides)
    }

    /// Fully resolved configuration; parsing it gives back `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.lr_initial.is_finite() && t.lr_initial > 0.0) {
            return bad(format!("train.lr_initial must be positive, got {}", t.lr_initial));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", t.weight_decay));
        }
        if !(t.depth_weight.is_finite() && t.depth_weight >= 0.0) {
            return bad(format!("train.depth_weight must be non-negative, got {}", t.depth_weight));
        }
        if let Some(c) = t.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("train.grad_clip must be positive, got {c}"));
            }
        }
        if t.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive".into());
        }
        t.lr_schedule.validate()?;
        self.model.validate()?;
        self.depth_loss.validate().map_err(|e| Error::Config(format!("depth_loss: {e}")))?;
        if !(self.seg_loss.alpha_ce.is_finite() && (0.0..=1.0).contains(&self.seg_loss.alpha_ce)) {
            return bad(format!("seg_loss.alpha_ce must lie in [0, 1], got {}", self.seg_loss.alpha_ce));
        }
        Ok(())
    }
}

/// Applies one `dotted.key=value` override to a TOML table. The value is
/// parsed as TOML and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursive table merge; values in `over` win. A `kind`-tagged table
/// whose kind changes replaces the default wholesale.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let p = RunConfig::parse("stage = \"pretrain\"", &[]).unwrap();
        assert_eq!(p, RunConfig::for_stage(Stage::Pretrain));
        assert_eq!(p.train.epochs, 200);
        assert_eq!(p.train.batch_size, 32);
        assert_eq!(p.train.lr_initial, 1e-4);
        assert_eq!(p.train.lr_schedule, LrSchedule::StepHalving { milestones: vec![80, 120] });

        let f = RunConfig::parse("stage = \"finetune\"", &[]).unwrap();
        assert_eq!(f.train.epochs, 120);
        assert_eq!(f.train.batch_size, 12);
        assert_eq!(f.train.weight_decay, 1e-5);
        assert_eq!(f.train.lr_schedule, LrSchedule::Polynomial { gamma: 0.9 });
        assert_eq!(f.train.grad_clip, None);
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = "stage = \"finetune\"\nseed = 7\n[model]\nencoder_kind = \"tiny\"\ninput_size = [32, 32]\n";
        let sets = vec![
            "train.epochs=3".to_string(),
            "train.grad_clip = 5.0".to_string(),
            "data.seg=some/dir".to_string(),
            "train.lr_schedule.kind=\"constant\"".to_string(),
        ];
        let c = RunConfig::parse(text, &sets).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.grad_clip, Some(5.0));
        assert_eq!(c.data.seg, Some(PathBuf::from("some/dir")));
        assert_eq!(c.train.lr_schedule, LrSchedule::Constant);
        assert_eq!(c.model.input_size, [32, 32]);
        let again = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::parse("stage = \"pretrain\"\nlearning_rate = 1.0", &[]).is_err());
        assert!(RunConfig::parse("stage = \"pretrain\"\n[train]\nbatchsize = 3", &[]).is_err());
        assert!(RunConfig::parse("stage = \"pretrain\"", &["model.colour=1".into()]).is_err());
        assert!(RunConfig::parse("stage = \"pretrain\"", &["train.epochs=0".into()]).is_err());
        assert!(RunConfig::parse("stage = \"pretrain\"", &["train.depth_weight=-1".into()]).is_err());
        assert!(RunConfig::parse("seed = 1", &[]).is_err());
        assert!(RunConfig::parse("stage = \"pretrain\"", &["noequals".into()]).is_err());
    }
}
