//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stereoseg::data::io::{read_rgb, write_disparity, write_disparity_png, write_mask};
use stereoseg::data::{resize_bilinear_window, Dataset, Split};
use stereoseg::eval::{
    depth_accuracy, disparity_range_px, emit_report, evaluate_segmentation, groups_of, loocv, read_report,
    ComparisonResult, DiceReport, Report, DICE_CONVENTION,
};
use stereoseg::gradcheck::{format_table, run_all, GradCheckConfig};
use stereoseg::model::Model;
use stereoseg::pipeline::{checkpoint, load_labeled, load_stereo_split, RunConfig, Stage};
use stereoseg::synthgen::{emit_dataset, knee_scene, routine_scene, Degradation, EmitOptions, SceneFamily, SceneSpec};

use crate::options::write_snapshot;

/// Options of `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOpts {
    pub family: SceneFamily,
    pub scenes: usize,
    /// Scene groups of the knee-like family; scenes are spread evenly.
    pub groups: u32,
    pub size: usize,
    pub seed: u64,
    /// `(train, test)` fractions.
    pub split: [f64; 2],
    /// Adds corrupted copies of every stereo pair.
    pub degrade: bool,
    pub stereo: bool,
    pub seg: bool,
}

impl Default for SynthOpts {
    fn default() -> Self {
        SynthOpts {
            family: SceneFamily::KneeLike,
            scenes: 20,
            groups: 5,
            size: 64,
            seed: 0,
            split: [0.8, 0.2],
            degrade: false,
            stereo: true,
            seg: true,
        }
    }
}

impl SynthOpts {
    pub fn specs(&self) -> Result<Vec<SceneSpec>> {
        if self.scenes == 0 || self.groups == 0 {
            bail!(stereoseg::Error::Config("synth needs at least one scene and one group".into()));
        }
        let per_group = self.scenes.div_ceil(self.groups as usize);
        Ok((0..self.scenes)
            .map(|i| match self.family {
                SceneFamily::Routine => routine_scene(self.size, self.seed, i as u32),
                SceneFamily::KneeLike => {
                    knee_scene(self.size, self.seed, (i / per_group) as u32, (i % per_group) as u32)
                }
            })
            .collect())
    }
}

pub fn synth(out: &Path, opts: SynthOpts) -> Result<()> {
    write_snapshot(out, "synth", None, &opts)?;
    let specs = opts.specs()?;
    let emit = EmitOptions {
        seed: opts.seed,
        write_stereo: opts.stereo,
        write_seg: opts.seg,
        degradations: if opts.degrade { Degradation::suite() } else { Vec::new() },
    };
    let manifest = emit_dataset(&specs, out, opts.split, &emit)?;
    println!(
        "wrote {} stereo and {} labelled records to {}",
        manifest.stereo.len(),
        manifest.seg.len(),
        out.display()
    );
    Ok(())
}

/// Options of `gradcheck`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOpts {
    pub seed: u64,
    pub instances: usize,
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        GradcheckOpts {
            seed: c.seed,
            instances: c.instances,
            size: c.size,
            step: c.step,
            tolerance: c.tolerance,
        }
    }
}

/// Runs the finite-difference suite; fails if any check fails.
pub fn gradcheck(out: Option<&Path>, opts: GradcheckOpts) -> Result<()> {
    if let Some(out) = out {
        write_snapshot(out, "gradcheck", None, &opts)?;
    }
    let cfg = GradCheckConfig {
        step: opts.step,
        tolerance: opts.tolerance,
        instances: opts.instances,
        size: opts.size,
        seed: opts.seed,
    };
    let outcomes = run_all(&cfg)?;
    print!("{}", format_table(&outcomes, &cfg));
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&outcomes).context("serializing results")?;
        stereoseg::data::io::write_atomic(&out.join("gradcheck.json"), json.as_bytes())?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if !failed.is_empty() {
        bail!(stereoseg::Error::Contract(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

/// `pretrain` and `finetune` take no options beyond the run config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {}

pub fn train(stage: Stage, out: &Path, cfg: RunConfig) -> Result<()> {
    write_snapshot(out, stage.name(), Some(&cfg), &TrainOpts {})?;
    let state = match stage {
        Stage::Pretrain => stereoseg::pipeline::pretrain(cfg, out)?,
        Stage::Finetune => stereoseg::pipeline::finetune(cfg, out)?,
    };
    match state.history.last() {
        Some(e) => println!(
            "{}: {} epochs, {} steps, final epoch loss {:.6}; checkpoint in {}",
            stage.name(),
            state.epoch,
            state.step,
            e.losses.total,
            out.display()
        ),
        None => println!("{}: nothing to do", stage.name()),
    }
    Ok(())
}

/// Options of `loocv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoocvOpts {
    /// Held-out groups; all labelled groups when absent.
    pub folds: Option<Vec<String>>,
    pub method: String,
}

impl Default for LoocvOpts {
    fn default() -> Self {
        LoocvOpts {
            folds: None,
            method: "joint".into(),
        }
    }
}

struct LoocvData {
    init: Model,
    stereo: Vec<stereoseg::data::StereoSample>,
    labeled: Vec<stereoseg::data::LabeledSample>,
    folds: Vec<String>,
}

fn loocv_data(cfg: &RunConfig, folds: &Option<Vec<String>>) -> Result<LoocvData> {
    let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| stereoseg::Error::Config(format!("{key} is required for cross-validation")).into())
    };
    let dep = need(&cfg.data.dep, "data.dep")?;
    let seg = need(&cfg.data.seg, "data.seg")?;
    let init = need(&cfg.train.init_checkpoint, "train.init_checkpoint")?;
    let init = checkpoint::load(&init)?.model;
    let stereo = load_stereo_split(&dep, Split::Train)?;
    let labeled = load_labeled(&seg, None, None)?;
    let folds = folds.clone().unwrap_or_else(|| groups_of(&labeled));
    Ok(LoocvData {
        init,
        stereo,
        labeled,
        folds,
    })
}

fn run_arm(cfg: &RunConfig, method: &str, data: &LoocvData, out: &Path) -> Result<DiceReport> {
    let dir = out.join(method);
    let result = loocv(cfg, method, &data.init, &data.stereo, &data.labeled, &data.folds, Some(&dir))?;
    emit_report(&Report::Dice(vec![result.report.clone()]), &dir.join("report"))?;
    Ok(result.report)
}

pub fn loocv_cmd(out: &Path, cfg: RunConfig, opts: LoocvOpts) -> Result<()> {
    write_snapshot(out, "loocv", Some(&cfg), &opts)?;
    let data = loocv_data(&cfg, &opts.folds)?;
    let report = run_arm(&cfg, &opts.method, &data, out)?;
    print!("{}", format_dice(&report));
    Ok(())
}

/// Options of `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOpts {
    /// Two existing report tables to compare instead of training both arms.
    pub reports: Option<Vec<PathBuf>>,
    pub folds: Option<Vec<String>>,
    /// Name of the arm trained as configured.
    pub arm_a: String,
    /// Name of the arm trained with `train.depth_weight = 0`.
    pub arm_b: String,
}

impl Default for CompareOpts {
    fn default() -> Self {
        CompareOpts {
            reports: None,
            folds: None,
            arm_a: "joint".into(),
            arm_b: "seg_only".into(),
        }
    }
}

fn single_report(path: &Path) -> Result<DiceReport> {
    match read_report(path)? {
        Report::Dice(mut r) if r.len() == 1 => Ok(r.remove(0)),
        _ => bail!(stereoseg::Error::Eval(format!("{} does not hold exactly one method", path.display()))),
    }
}

pub fn compare(out: &Path, cfg: Option<RunConfig>, opts: CompareOpts) -> Result<()> {
    write_snapshot(out, "compare", cfg.as_ref(), &opts)?;
    let (a, b) = match (&opts.reports, cfg) {
        (Some(paths), _) => {
            let [pa, pb] = paths.as_slice() else {
                bail!(stereoseg::Error::Config("compare needs exactly two report tables".into()));
            };
            (single_report(pa)?, single_report(pb)?)
        }
        (None, Some(cfg)) => {
            let data = loocv_data(&cfg, &opts.folds)?;
            let a = run_arm(&cfg, &opts.arm_a, &data, out)?;
            let mut ablation = cfg.clone();
            ablation.train.depth_weight = 0.0;
            let b = run_arm(&ablation, &opts.arm_b, &data, out)?;
            (a, b)
        }
        (None, None) => unreachable!("compare resolves a run config when no reports are given"),
    };
    let result = ComparisonResult::from_reports(&a, &b)?;
    let files = emit_report(
        &Report::Comparison {
            result: result.clone(),
            arms: vec![a.clone(), b.clone()],
        },
        &out.join("comparison"),
    )?;
    print!("{}{}", format_dice(&a), format_dice(&b));
    println!(
        "wilcoxon {} vs {}: n = {}, statistic = {}, p = {:.6} ({}), direction {:?}{}",
        result.method_a,
        result.method_b,
        result.n,
        result.statistic,
        result.p_value,
        if result.exact { "exact" } else { "normal approximation" },
        result.direction,
        if result.all_zero { ", all differences zero" } else { "" }
    );
    println!("table {}, chart {}", files.table.display(), files.chart.display());
    Ok(())
}

/// Options of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpts {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// `train`, `test` or `all`.
    pub split: String,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts {
            checkpoint: None,
            data: None,
            split: "test".into(),
        }
    }
}

/// Depth accuracy of one stereo pair with ground truth.
#[derive(Clone, Debug, Serialize)]
struct DepthLine {
    scene_id: String,
    frame_index: u32,
    mae_px: f64,
    rel_err: f64,
    range_px: f64,
    mae_over_range: f64,
}

pub fn eval(out: &Path, opts: EvalOpts) -> Result<()> {
    write_snapshot(out, "eval", None, &opts)?;
    let ckpt = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| stereoseg::Error::Config("eval needs --checkpoint".into()))?;
    let root = opts
        .data
        .as_ref()
        .ok_or_else(|| stereoseg::Error::Config("eval needs --data".into()))?;
    let split = match opts.split.as_str() {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        s => bail!(stereoseg::Error::Config(format!("unknown split `{s}` (train, test, all)"))),
    };
    let model = checkpoint::load(ckpt)?.model;
    let ds = Dataset::open(root)?;
    let mut text = String::new();

    let labeled = load_labeled(root, split, None)?;
    if !labeled.is_empty() {
        let mut images = Vec::new();
        for g in groups_of(&labeled) {
            let group: Vec<_> = labeled.iter().filter(|s| s.knee_id == g).cloned().collect();
            images.extend(evaluate_segmentation(&model, &group, &g)?);
        }
        let report = DiceReport::from_images("model", images)?;
        emit_report(&Report::Dice(vec![report.clone()]), &out.join("segmentation"))?;
        text.push_str(&format_dice(&report));
    }

    let mut lines = Vec::new();
    for i in 0..ds.manifest.stereo.len() {
        let rec = &ds.manifest.stereo[i];
        if split.is_some_and(|s| rec.split != s) {
            continue;
        }
        let Some((gt, valid)) = ds.load_ground_truth(i)? else { continue };
        let pair = ds.load_stereo(i)?;
        let pred = model.infer_depth(&pair.left)?;
        let (mae_px, rel_err) = depth_accuracy(&pred, &gt, &valid)?;
        let range_px = disparity_range_px(&gt, &valid)?;
        lines.push(DepthLine {
            scene_id: rec.scene_id.clone(),
            frame_index: rec.frame_index,
            mae_px,
            rel_err,
            range_px,
            mae_over_range: if range_px > 0.0 { mae_px / range_px } else { f64::NAN },
        });
    }
    if !lines.is_empty() {
        let mut jsonl = String::new();
        for l in &lines {
            let _ = writeln!(jsonl, "{}", serde_json::to_string(l).context("serializing depth line")?);
        }
        stereoseg::data::io::write_atomic(&out.join("depth.jsonl"), jsonl.as_bytes())?;
        let n = lines.len() as f64;
        let mean = |f: fn(&DepthLine) -> f64| lines.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            text,
            "depth over {} pairs: mae {:.4} px, relative error {:.4}, mae / disparity range {:.4}",
            lines.len(),
            mean(|l| l.mae_px),
            mean(|l| l.rel_err),
            mean(|l| l.mae_over_range)
        );
    }
    if text.is_empty() {
        bail!(stereoseg::Error::Eval(format!(
            "no labelled images or ground-truth disparities in the {} split of {}",
            opts.split,
            root.display()
        )));
    }
    print!("{text}");
    Ok(())
}

/// Options of `infer`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOpts {
    pub image: Option<PathBuf>,
    /// Trained weights; a freshly initialised model from the run config is
    /// used when absent.
    pub checkpoint: Option<PathBuf>,
}

pub fn infer(out: &Path, cfg: RunConfig, opts: InferOpts) -> Result<()> {
    write_snapshot(out, "infer", Some(&cfg), &opts)?;
    let path = opts
        .image
        .as_ref()
        .ok_or_else(|| stereoseg::Error::Config("infer needs --image".into()))?;
    let model = match &opts.checkpoint {
        Some(c) => checkpoint::load(c)?.model,
        None => Model::build(&cfg.model, cfg.seed)?,
    };
    let mut image = read_rgb(path)?;
    let [h, w] = model.config().input_size;
    let (ih, iw, _) = image.shape();
    if (ih, iw) != (h, w) {
        image = resize_bilinear_window(&image, (0, 0, ih, iw), h, w);
    }
    let output = model.forward(&image)?;
    let mask = output.seg_heads.last().expect("model has segmentation heads").argmax();
    let disp = &output.pyramid.left[0];
    write_mask(&out.join("mask.png"), &mask)?;
    write_disparity(&out.join("disparity.bin"), disp)?;
    write_disparity_png(&out.join("disparity.png"), disp, model.config().d_max)?;
    let (lo, hi) = disp
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "wrote mask.png, disparity.bin and disparity.png to {}; disparity range [{lo:.5}, {hi:.5}] of width",
        out.display()
    );
    Ok(())
}

/// Text table of a Dice report: one row per fold, one column per class.
pub fn format_dice(r: &DiceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method {}", r.method);
    let classes: Vec<&str> = r.classes.iter().map(|c| c.key.as_str()).collect();
    let _ = write!(s, "{:<16}", "fold");
    for c in &classes {
        let _ = write!(s, "{c:>16}");
    }
    let _ = writeln!(s, "{:>16}", "mean");
    for f in &r.folds {
        let _ = write!(s, "{:<16}", f.key);
        for c in &classes {
            let cell = r.cells.iter().find(|x| x.fold_id == f.key && x.class == *c).expect("cell per fold and class");
            let _ = write!(s, "{:>16}", format!("{:.3}±{:.3}", cell.dice_mean, cell.dice_sd));
        }
        let _ = writeln!(s, "{:>16}", format!("{:.3}±{:.3}", f.mean, f.sd));
    }
    let _ = write!(s, "{:<16}", "all");
    for c in &r.classes {
        let _ = write!(s, "{:>16}", format!("{:.3}±{:.3}", c.mean, c.sd));
    }
    let _ = writeln!(s, "{:>16}", format!("{:.3}±{:.3}", r.grand.mean, r.grand.sd));
    let _ = writeln!(s, "{DICE_CONVENTION}");
    s
}
