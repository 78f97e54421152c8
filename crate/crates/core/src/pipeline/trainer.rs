//! Pre-training and fine-tuning loops.
//!
//! Every random choice during training is drawn from a stream derived from
//! the run seed and the position in the run (epoch, batch, sample), so the
//! training state needs no generator snapshots: the counters in
//! [`TrainState`] fully determine what happens next.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{RunConfig, Stage};
use super::metrics::{LogRecord, MetricsLog};
use crate::data::{augment_depth, augment_seg, batch_order, LabeledSample, StereoSample};
use crate::error::{Error, Result};
use crate::grid::{SegMap, NUM_CLASSES};
use crate::losses::{
    depth_loss_terms, depth_loss_with_grad, seg_loss_with_grad, DepthLossWeights,
    DisparityPyramid, SegLossWeights, StereoPyramid, NUM_SCALES, NUM_SEG_HEADS,
};
use crate::model::{pyramid_from, seg_map_from, HeadNodes, Model, DISP_HEAD_PREFIX, ENCODER_PREFIX, SEG_HEAD_PREFIX};
use crate::nn::{Adam, Graph, ParamStore};
use crate::{par, rng};

/// Loss weights of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub depth: DepthLossWeights,
    pub seg: SegLossWeights,
    /// Multiplier of the depth loss in the total.
    pub depth_weight: f64,
}

impl LossSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        LossSettings {
            depth: c.depth_loss,
            seg: c.seg_loss,
            depth_weight: match c.stage {
                Stage::Pretrain => 1.0,
                Stage::Finetune => c.train.depth_weight,
            },
        }
    }
}

/// Batch-mean loss values. Depth entries are zero when the batch has no
/// stereo samples, segmentation entries when it has no labelled ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    /// Unweighted sums over scales and sides.
    pub appearance: f64,
    pub lr_consistency: f64,
    pub smoothness: f64,
    /// Weighted depth loss.
    pub depth: f64,
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub seg: f64,
    /// `seg + depth_weight · depth`.
    pub total: f64,
}

impl BatchLosses {
    fn add_scaled(&mut self, o: &BatchLosses, s: f64) {
        self.appearance += s * o.appearance;
        self.lr_consistency += s * o.lr_consistency;
        self.smoothness += s * o.smoothness;
        self.depth += s * o.depth;
        self.seg_ce += s * o.seg_ce;
        self.seg_dice += s * o.seg_dice;
        self.seg += s * o.seg;
        self.total += s * o.total;
    }
}

/// Result of a recorded forward pass over one batch.
pub struct BatchForward {
    pub graph: Graph,
    pub heads: HeadNodes,
    pub losses: BatchLosses,
    /// The segmentation heads of each labelled sample.
    pub seg_heads: Vec<Vec<SegMap>>,
    /// Disparity pyramid of each stereo sample.
    pub pyramids: Vec<DisparityPyramid>,
    /// Indexed by labelled sample, then head.
    seg_grads: Vec<Vec<Vec<f64>>>,
    depth_grads: Vec<DisparityPyramid>,
    depth_weight: f64,
    d_max: f64,
}

/// Runs the network on labelled images followed by left views of stereo
/// samples (one concatenated batch) and evaluates both losses. With
/// `want_grad` the loss gradients with respect to the network outputs are
/// kept for [`BatchForward::backward`].
pub fn forward_batch(
    model: &Model,
    seg: &[LabeledSample],
    dep: &[StereoSample],
    settings: &LossSettings,
    training: bool,
    want_grad: bool,
) -> Result<BatchForward> {
    let mut images: Vec<_> = seg.iter().map(|s| &s.image).collect();
    images.extend(dep.iter().map(|s| &s.left));
    let input = model.input_tensor(&images)?;
    let mut g = Graph::new();
    let x = g.leaf(input);
    let heads = model.forward_graph(&mut g, x, training, !seg.is_empty());
    let outputs = heads.disp.iter().map(|&d| ("disparity", d)).chain(heads.seg.iter().map(|&h| ("segmentation", h)));
    for (kind, node) in outputs {
        if !g.value(node).data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                batch_ids: Vec::new(),
                terms: format!("{kind} output of the network is not finite"),
            });
        }
    }
    let d_max = model.config().d_max;
    let n_seg = seg.len();

    // Every head is supervised and the segmentation loss is their mean, so
    // the last head, which inference reads, is trained on its own.
    let seg_out: Vec<Result<_>> = par::map_range(n_seg, |k| {
        let maps = heads.seg.iter().map(|&h| seg_map_from(&g, h, k)).collect::<Result<Vec<_>>>()?;
        let mut parts = Vec::with_capacity(maps.len());
        let mut grads = Vec::with_capacity(maps.len());
        for m in &maps {
            let (p, grad) = seg_loss_with_grad(&seg[k].mask, m, &settings.seg)?;
            parts.push(p);
            grads.push(grad);
        }
        Ok((maps, parts, grads))
    });
    let dep_out: Vec<Result<_>> = par::map_range(dep.len(), |k| {
        let pyr = pyramid_from(&g, &heads, n_seg + k, d_max)?;
        let images = StereoPyramid::build(&dep[k])?;
        if want_grad && settings.depth_weight > 0.0 {
            let (terms, grad) = depth_loss_with_grad(&images, &pyr, &settings.depth)?;
            Ok((pyr, terms, Some(grad)))
        } else {
            settings.depth.validate()?;
            let terms = depth_loss_terms(&images, &pyr, settings.depth.gamma)?;
            Ok((pyr, terms, None))
        }
    });

    let mut losses = BatchLosses::default();
    let mut seg_heads = Vec::with_capacity(n_seg);
    let mut seg_grads = Vec::new();
    for r in seg_out {
        let (maps, parts, grads) = r?;
        let s = 1.0 / (n_seg * parts.len()) as f64;
        for p in &parts {
            losses.seg_ce += s * p.cross_entropy;
            losses.seg_dice += s * p.dice;
            losses.seg += s * p.total;
        }
        seg_heads.push(maps);
        if want_grad {
            seg_grads.push(grads);
        }
    }
    let mut pyramids = Vec::with_capacity(dep.len());
    let mut depth_grads = Vec::new();
    for r in dep_out {
        let (pyr, terms, grad) = r?;
        let s = 1.0 / dep.len() as f64;
        losses.appearance += s * terms.appearance_sum();
        losses.lr_consistency += s * terms.lr_sum();
        losses.smoothness += s * terms.smoothness_sum();
        losses.depth += s * terms.weighted_total(&settings.depth);
        pyramids.push(pyr);
        depth_grads.extend(grad);
    }
    losses.total = losses.seg + settings.depth_weight * losses.depth;
    Ok(BatchForward {
        graph: g,
        heads,
        losses,
        seg_heads,
        pyramids,
        seg_grads,
        depth_grads,
        depth_weight: settings.depth_weight,
        d_max,
    })
}

impl BatchForward {
    /// Back-propagates the total loss into the parameter gradients.
    pub fn backward(&self, store: &mut ParamStore) {
        let n_seg = self.seg_heads.len();
        let mut seeds: Vec<(crate::nn::NodeId, Vec<f32>)> = Vec::new();
        if !self.seg_grads.is_empty() {
            let scale = 1.0 / (NUM_SEG_HEADS * n_seg) as f64;
            for (j, &h) in self.heads.seg.iter().enumerate() {
                let t = self.graph.value(h);
                let hw = t.h() * t.w();
                let mut seed = vec![0.0f32; t.numel()];
                for (k, grads) in self.seg_grads.iter().enumerate() {
                    let grad = &grads[j];
                    let out = &mut seed[k * t.sample_len()..(k + 1) * t.sample_len()];
                    for p in 0..hw {
                        for c in 0..NUM_CLASSES {
                            out[c * hw + p] = (scale * grad[p * NUM_CLASSES + c]) as f32;
                        }
                    }
                }
                seeds.push((h, seed));
            }
        }
        if !self.depth_grads.is_empty() {
            // disparity = d_max · activation
            let scale = self.depth_weight * self.d_max / self.depth_grads.len() as f64;
            for s in 0..NUM_SCALES {
                let node = self.heads.disp[s];
                let t = self.graph.value(node);
                let hw = t.h() * t.w();
                let mut seed = vec![0.0f32; t.numel()];
                for (k, grad) in self.depth_grads.iter().enumerate() {
                    let base = (n_seg + k) * t.sample_len();
                    for (side, maps) in [&grad.left, &grad.right].into_iter().enumerate() {
                        let out = &mut seed[base + side * hw..base + (side + 1) * hw];
                        for (o, &v) in out.iter_mut().zip(maps[s].data()) {
                            *o = (scale * v) as f32;
                        }
                    }
                }
                seeds.push((node, seed));
            }
        }
        let refs: Vec<(crate::nn::NodeId, &[f32])> = seeds.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        self.graph.backward(store, &refs);
    }
}

/// Loss record of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: BatchLosses,
}

/// Mean losses over the steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub steps: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: BatchLosses,
}

/// Lowest mean epoch loss seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: u32,
    pub total: f64,
}

/// Running sums over the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccum {
    pub steps: u64,
    pub sums: BatchLosses,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Current epoch (0-based).
    pub epoch: u32,
    /// Index of the next batch within the current epoch.
    pub batch_in_epoch: usize,
    /// Optimisation steps taken so far.
    pub step: u64,
    pub accum: EpochAccum,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
}

impl TrainState {
    fn fresh(config: RunConfig, model: Model) -> Self {
        let optimizer = Adam::new(model.params(), config.train.weight_decay);
        TrainState {
            config,
            model,
            optimizer,
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            accum: EpochAccum::default(),
            history: Vec::new(),
            best: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs || self.config.train.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Rejects a checkpoint whose network differs from `config`.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        if self.config.model != config.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {:?} differs from requested {:?}",
                self.config.model, config.model
            )));
        }
        if self.config.stage != config.stage {
            return Err(Error::Checkpoint(format!(
                "checkpoint is from stage {}, requested {}",
                self.config.stage.name(),
                config.stage.name()
            )));
        }
        Ok(())
    }
}

/// Name of the checkpoint file written into a run's output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
/// Name of the metrics log written into a run's output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct Trainer {
    state: TrainState,
    stereo: Vec<StereoSample>,
    labeled: Vec<LabeledSample>,
    out_dir: Option<PathBuf>,
    log: Option<MetricsLog>,
}

impl Trainer {
    /// Stage 1: depth-only training on stereo pairs.
    pub fn pretrain(config: RunConfig, stereo: Vec<StereoSample>) -> Result<Trainer> {
        config.validate()?;
        if config.stage != Stage::Pretrain {
            return Err(Error::Config("pretrain needs stage = \"pretrain\"".into()));
        }
        if stereo.is_empty() {
            return Err(Error::Data(vec!["pre-training dataset has no training pairs".into()]));
        }
        let mut model = Model::build(&config.model, config.seed)?;
        if let Some(path) = &config.model.encoder_weights {
            let src = checkpoint::load(Path::new(path))?;
            copy_encoder(&mut model, &src.model)?;
        }
        Ok(Trainer::with_state(TrainState::fresh(config, model), stereo, Vec::new()))
    }

    /// Stage 2: joint training. The encoder comes from `init`; decoder and
    /// all heads start from the fresh initialisation of `config.seed`.
    pub fn finetune(config: RunConfig, init: &Model, stereo: Vec<StereoSample>, labeled: Vec<LabeledSample>) -> Result<Trainer> {
        config.validate()?;
        if config.stage != Stage::Finetune {
            return Err(Error::Config("finetune needs stage = \"finetune\"".into()));
        }
        let mut problems = Vec::new();
        if stereo.is_empty() {
            problems.push("depth dataset has no training pairs".to_string());
        }
        if labeled.is_empty() {
            problems.push("segmentation dataset has no training images".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Data(problems));
        }
        let mut model = Model::build(&config.model, config.seed)?;
        copy_encoder(&mut model, init)?;
        Ok(Trainer::with_state(TrainState::fresh(config, model), stereo, labeled))
    }

    /// Continues a saved run on the same data.
    pub fn resume(state: TrainState, stereo: Vec<StereoSample>, labeled: Vec<LabeledSample>) -> Result<Trainer> {
        state.config.validate()?;
        if stereo.is_empty() || (state.config.stage == Stage::Finetune && labeled.is_empty()) {
            return Err(Error::Data(vec!["resumed run has an empty dataset".into()]));
        }
        Ok(Trainer::with_state(state, stereo, labeled))
    }

    fn with_state(state: TrainState, stereo: Vec<StereoSample>, labeled: Vec<LabeledSample>) -> Trainer {
        Trainer {
            state,
            stereo,
            labeled,
            out_dir: None,
            log: None,
        }
    }

    /// Writes metrics to `dir/metrics.jsonl` (appending) and checkpoints to
    /// `dir/checkpoint.ckpt`.
    pub fn with_output(mut self, dir: &Path) -> Result<Trainer> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut log = MetricsLog::open(&dir.join(METRICS_FILE))?;
        log.write(&LogRecord::Config {
            stage: self.state.config.stage,
            resumed_at_step: self.state.step,
            config: self.state.config.to_toml(),
        })?;
        self.log = Some(log);
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        let bs = self.state.config.train.batch_size;
        let dep = self.stereo.len().div_ceil(bs);
        match self.state.config.stage {
            Stage::Pretrain => dep,
            Stage::Finetune => dep.max(self.labeled.len().div_ceil(bs)),
        }
    }

    /// Trains until the configured epoch count or step limit.
    pub fn run(&mut self) -> Result<()> {
        let threads = self.state.config.threads;
        par::with_threads(threads, || {
            while !self.state.is_finished() {
                self.step()?;
            }
            self.save_checkpoint()
        })
    }

    /// Takes up to `n` steps (fewer if the run finishes first).
    pub fn run_steps(&mut self, n: usize) -> Result<Vec<StepRecord>> {
        let threads = self.state.config.threads;
        par::with_threads(threads, || {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                if self.state.is_finished() {
                    break;
                }
                out.push(self.step()?);
            }
            Ok(out)
        })
    }

    /// Writes the current state to the output directory, if one is set.
    pub fn save_checkpoint(&mut self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            checkpoint::save(&self.state, &dir.join(CHECKPOINT_FILE))?;
        }
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(())
    }

    /// The augmented batches of step `k` of `epoch`.
    fn batch(&self, epoch: u32, k: usize) -> (Vec<LabeledSample>, Vec<StereoSample>) {
        let cfg = &self.state.config;
        let bs = cfg.train.batch_size;
        let seed = cfg.seed;
        let e = epoch as u64;
        let pick = |n: usize, name: &str| {
            let order = batch_order(&(0..n).collect::<Vec<_>>(), bs, rng::derive_seed(seed, &[rng::tag(name)]), e);
            order[k % order.len()].clone()
        };
        let dep_ids = pick(self.stereo.len(), "order-dep");
        let dep = par::map_slice(&dep_ids, |&i| {
            if cfg.augment.depth.enabled {
                let mut r = rng::derive(seed, &[rng::tag("aug-depth"), e, k as u64, i as u64]);
                augment_depth(&self.stereo[i], &cfg.augment.depth, &mut r)
            } else {
                self.stereo[i].clone()
            }
        });
        let seg = if cfg.stage == Stage::Finetune {
            let seg_ids = pick(self.labeled.len(), "order-seg");
            par::map_slice(&seg_ids, |&i| {
                if cfg.augment.seg.enabled {
                    let mut r = rng::derive(seed, &[rng::tag("aug-seg"), e, k as u64, i as u64]);
                    augment_seg(&self.labeled[i], &cfg.augment.seg, &mut r)
                } else {
                    self.labeled[i].clone()
                }
            })
        } else {
            Vec::new()
        };
        (seg, dep)
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.state.is_finished() {
            return Err(Error::Contract("training run already finished".into()));
        }
        let epoch = self.state.epoch;
        let k = self.state.batch_in_epoch;
        let (seg, dep) = self.batch(epoch, k);
        let cfg = self.state.config.clone();
        let lr = cfg.train.lr_schedule.lr(cfg.train.lr_initial, epoch, cfg.train.epochs);
        let settings = LossSettings::from_config(&cfg);

        let batch_ids = || {
            let mut ids: Vec<String> = seg.iter().map(|s| format!("{}#{}", s.knee_id, s.frame_index)).collect();
            ids.extend(dep.iter().map(|s| format!("{}#{}", s.scene_id, s.frame_index)));
            ids
        };
        let fwd = match forward_batch(&self.state.model, &seg, &dep, &settings, true, true) {
            Err(Error::NonFinite { terms, .. }) => {
                return Err(Error::NonFinite {
                    step: self.state.step,
                    batch_ids: batch_ids(),
                    terms,
                })
            }
            other => other?,
        };
        let l = fwd.losses;
        if !l.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.step,
                batch_ids: batch_ids(),
                terms: format!(
                    "appearance={} lr_consistency={} smoothness={} depth={} seg_ce={} seg_dice={} seg={}",
                    l.appearance, l.lr_consistency, l.smoothness, l.depth, l.seg_ce, l.seg_dice, l.seg
                ),
            });
        }
        let store = self.state.model.params_mut();
        store.zero_grad();
        fwd.backward(store);
        let trainable = |name: &str| match cfg.stage {
            Stage::Pretrain => !name.starts_with(SEG_HEAD_PREFIX),
            Stage::Finetune => settings.depth_weight > 0.0 || !name.starts_with(DISP_HEAD_PREFIX),
        };
        if let Some(max_norm) = cfg.train.grad_clip {
            clip_gradients(store, max_norm, &trainable);
        }
        self.state.optimizer.step(store, lr, |p| trainable(&p.name));
        self.state.model.commit_batch_stats(&fwd.graph);

        let record = StepRecord {
            step: self.state.step,
            epoch,
            lr,
            losses: l,
        };
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        self.state.accum.steps += 1;
        self.state.accum.sums.add_scaled(&l, 1.0);
        if let Some(log) = &mut self.log {
            log.write(&LogRecord::Step(record))?;
        }
        if self.state.batch_in_epoch >= self.steps_per_epoch() {
            self.finish_epoch(lr)?;
        }
        Ok(record)
    }

    fn finish_epoch(&mut self, lr: f64) -> Result<()> {
        let st = &mut self.state;
        let mut mean = BatchLosses::default();
        mean.add_scaled(&st.accum.sums, 1.0 / st.accum.steps.max(1) as f64);
        let rec = EpochRecord {
            epoch: st.epoch,
            steps: st.accum.steps,
            lr,
            losses: mean,
        };
        st.history.push(rec);
        if st.best.is_none_or(|b| mean.total < b.total) {
            st.best = Some(BestRecord {
                epoch: st.epoch,
                total: mean.total,
            });
        }
        st.epoch += 1;
        st.batch_in_epoch = 0;
        st.accum = EpochAccum::default();
        let every = st.config.train.checkpoint_every;
        let due = st.epoch % every == 0 || st.epoch == st.config.train.epochs;
        if let Some(log) = &mut self.log {
            log.write(&LogRecord::Epoch(rec))?;
        }
        if due {
            self.save_checkpoint()?;
        }
        Ok(())
    }
}

fn copy_encoder(model: &mut Model, src: &Model) -> Result<()> {
    if src.config().encoder_kind != model.config().encoder_kind {
        return Err(Error::Checkpoint(format!(
            "encoder kind mismatch: checkpoint has {}, config wants {}",
            src.config().encoder_kind.name(),
            model.config().encoder_kind.name()
        )));
    }
    model.params_mut().copy_prefixed_from(src.params(), ENCODER_PREFIX)?;
    Ok(())
}

/// Rescales the selected gradients so their joint L2 norm is at most
/// `max_norm`.
fn clip_gradients(store: &mut ParamStore, max_norm: f64, select: &dyn Fn(&str) -> bool) {
    let norm = store
        .iter()
        .filter(|(_, p)| select(&p.name))
        .flat_map(|(_, p)| p.grad.iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in store.iter_mut().filter(|p| select(&p.name)) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}
