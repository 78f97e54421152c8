//! Leave-one-group-out cross-validation of the fine-tuning stage.

use std::path::Path;

use super::metrics::foreground_dice;
use super::report::{DiceReport, ImageDice};
use crate::data::{LabeledSample, StereoSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{RunConfig, Trainer};
use crate::rng::{derive_seed, tag};

/// Seed of the fold that holds out `fold_id`. It depends only on the master
/// seed and the fold id, never on the order folds are run in.
pub fn fold_seed(master: u64, fold_id: &str) -> u64 {
    derive_seed(master, &[tag("fold"), tag(fold_id)])
}

/// Distinct groups of `samples`, in first-seen order.
pub fn groups_of(samples: &[LabeledSample]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in samples {
        if !out.contains(&s.knee_id) {
            out.push(s.knee_id.clone());
        }
    }
    out
}

/// Per-image foreground Dice of `model` on `samples`, attributed to `fold_id`.
pub fn evaluate_segmentation(model: &Model, samples: &[LabeledSample], fold_id: &str) -> Result<Vec<ImageDice>> {
    samples
        .iter()
        .map(|s| {
            let pred = model.infer_segmentation(&s.image)?;
            Ok(ImageDice {
                fold_id: fold_id.to_string(),
                image_id: format!("{}#{}", s.knee_id, s.frame_index),
                dice: foreground_dice(&pred, &s.mask)?,
            })
        })
        .collect()
}

/// A trained fold.
pub struct FoldOutcome {
    pub fold_id: String,
    pub seed: u64,
    pub model: Model,
    pub images: Vec<ImageDice>,
}

/// Result of [`loocv`].
pub struct LoocvOutcome {
    pub report: DiceReport,
    pub folds: Vec<FoldOutcome>,
}

/// Trains and evaluates one fold: fine-tunes from `init` on every labelled
/// group except `fold_id` and scores the held-out group.
pub fn run_fold(
    template: &RunConfig,
    init: &Model,
    stereo: &[StereoSample],
    labeled: &[LabeledSample],
    fold_id: &str,
    out: Option<&Path>,
) -> Result<FoldOutcome> {
    let (test, train): (Vec<LabeledSample>, Vec<LabeledSample>) =
        labeled.iter().cloned().partition(|s| s.knee_id == fold_id);
    if test.is_empty() {
        return Err(Error::Eval(format!("fold {fold_id} has no test images")));
    }
    if train.is_empty() {
        return Err(Error::Eval(format!("fold {fold_id} leaves no training images")));
    }
    let mut cfg = template.clone();
    cfg.seed = fold_seed(template.seed, fold_id);
    let seed = cfg.seed;
    let mut trainer = Trainer::finetune(cfg, init, stereo.to_vec(), train)?;
    if let Some(dir) = out {
        trainer = trainer.with_output(&dir.join(format!("fold_{fold_id}")))?;
    }
    trainer.run()?;
    let model = trainer.into_state().model;
    let images = evaluate_segmentation(&model, &test, fold_id)?;
    Ok(FoldOutcome {
        fold_id: fold_id.to_string(),
        seed,
        model,
        images,
    })
}

/// Leave-one-group-out cross-validation over `folds` (held-out group ids).
///
/// Folds run in the given order, but each fold's result depends only on
/// its id. When `out` is set every fold writes its checkpoint and metrics
/// log to `out/fold_{id}`.
pub fn loocv(
    template: &RunConfig,
    method: &str,
    init: &Model,
    stereo: &[StereoSample],
    labeled: &[LabeledSample],
    folds: &[String],
    out: Option<&Path>,
) -> Result<LoocvOutcome> {
    let groups = groups_of(labeled);
    if groups.len() < 2 {
        return Err(Error::Eval(format!(
            "cross-validation needs at least 2 groups, found {}",
            groups.len()
        )));
    }
    if folds.is_empty() {
        return Err(Error::Eval("no folds requested".into()));
    }
    let mut outcomes = Vec::with_capacity(folds.len());
    for f in folds {
        log::info!("{method}: fold {f}");
        outcomes.push(run_fold(template, init, stereo, labeled, f, out)?);
    }
    let images = outcomes.iter().flat_map(|f| f.images.iter().cloned()).collect();
    Ok(LoocvOutcome {
        report: DiceReport::from_images(method, images)?,
        folds: outcomes,
    })
}
