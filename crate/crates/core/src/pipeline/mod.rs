//! Two-stage training: depth pre-training on stereo pairs, then joint
//! fine-tuning of segmentation and depth.

pub mod checkpoint;
mod config;
mod metrics;
mod schedule;
mod trainer;

pub use config::{apply_override, AugmentConfig, DataPaths, RunConfig, Stage, TrainConfig};
pub use metrics::{read_log, LogRecord, MetricsLog};
pub use schedule::LrSchedule;
pub use trainer::{
    forward_batch, BatchForward, BatchLosses, BestRecord, EpochAccum, EpochRecord, LossSettings, StepRecord,
    TrainState, Trainer, CHECKPOINT_FILE, METRICS_FILE,
};

use std::path::Path;

use crate::data::{Dataset, LabeledSample, Split, StereoSample};
use crate::error::{Error, Result};

/// Training-split stereo pairs of a dataset root.
pub fn load_stereo_split(root: &Path, split: Split) -> Result<Vec<StereoSample>> {
    let ds = Dataset::open(root)?;
    ds.manifest.stereo_indices(split).into_iter().map(|i| ds.load_stereo(i)).collect()
}

/// Labelled images of a dataset root, optionally restricted to a split
/// and to a set of groups.
pub fn load_labeled(root: &Path, split: Option<Split>, groups: Option<&[String]>) -> Result<Vec<LabeledSample>> {
    let ds = Dataset::open(root)?;
    (0..ds.manifest.seg.len())
        .filter(|&i| {
            let r = &ds.manifest.seg[i];
            split.is_none_or(|s| r.split == s) && groups.is_none_or(|g| g.contains(&r.knee_id))
        })
        .map(|i| ds.load_labeled(i))
        .collect()
}

/// Runs stage 1 as configured, writing checkpoints and the metrics log
/// into `out`.
pub fn pretrain(config: RunConfig, out: &Path) -> Result<TrainState> {
    let root = config
        .data
        .pre
        .clone()
        .ok_or_else(|| Error::Config("data.pre is required for pre-training".into()))?;
    let stereo = load_stereo_split(&root, Split::Train)?;
    let mut t = Trainer::pretrain(config, stereo)?.with_output(out)?;
    t.run()?;
    Ok(t.into_state())
}

/// Runs stage 2 as configured, starting from `train.init_checkpoint`.
pub fn finetune(config: RunConfig, out: &Path) -> Result<TrainState> {
    let dep = config
        .data
        .dep
        .clone()
        .ok_or_else(|| Error::Config("data.dep is required for fine-tuning".into()))?;
    let seg = config
        .data
        .seg
        .clone()
        .ok_or_else(|| Error::Config("data.seg is required for fine-tuning".into()))?;
    let init_path = config
        .train
        .init_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("train.init_checkpoint is required for fine-tuning".into()))?;
    let init = checkpoint::load(&init_path)?;
    let stereo = load_stereo_split(&dep, Split::Train)?;
    let labeled = load_labeled(&seg, Some(Split::Train), None)?;
    let mut t = Trainer::finetune(config, &init.model, stereo, labeled)?.with_output(out)?;
    t.run()?;
    Ok(t.into_state())
}

/// Continues the run saved in `dir`, reloading its datasets from the
/// stored configuration.
pub fn resume(dir: &Path) -> Result<TrainState> {
    let state = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let cfg = state.config.clone();
    let (stereo, labeled) = match cfg.stage {
        Stage::Pretrain => {
            let root = cfg.data.pre.clone().ok_or_else(|| Error::Config("data.pre missing in checkpoint".into()))?;
            (load_stereo_split(&root, Split::Train)?, Vec::new())
        }
        Stage::Finetune => {
            let dep = cfg.data.dep.clone().ok_or_else(|| Error::Config("data.dep missing in checkpoint".into()))?;
            let seg = cfg.data.seg.clone().ok_or_else(|| Error::Config("data.seg missing in checkpoint".into()))?;
            (load_stereo_split(&dep, Split::Train)?, load_labeled(&seg, Some(Split::Train), None)?)
        }
    };
    let mut t = Trainer::resume(state, stereo, labeled)?.with_output(dir)?;
    t.run()?;
    Ok(t.into_state())
}
