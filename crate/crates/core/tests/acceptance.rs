//! Acceptance suite, run without the libtest harness so that each
//! criterion prints exactly one `ACn PASS|FAIL ...` line. Arguments that do
//! not start with `-` select criteria by substring (`ac03`, `ac1`). The
//! process exits nonzero when any selected criterion fails.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::Rng as _;
use common::{knee_samples, overfit_fixture, routine_samples, split, tiny_config};
use stereoseg::eval::{
    depth_accuracy, disparity_range_px, emit_report, evaluate_segmentation, wilcoxon_signed_rank, ComparisonResult,
    DiceReport, Report,
};
use stereoseg::geometry::{warp_horizontal, Direction};
use stereoseg::gradcheck::{self, GradCheckConfig};
use stereoseg::grid::{Class, DisparityMap, ImageGrid, LabelMask, SegMap, NUM_CLASSES};
use stereoseg::losses::{
    appearance_loss, lr_consistency_loss, seg_loss, smoothness_loss, DepthLossWeights, SegLossWeights, Side,
    NUM_SCALES, NUM_SEG_HEADS,
};
use stereoseg::model::{Model, ModelConfig};
use stereoseg::pipeline::{checkpoint, LrSchedule, RunConfig, Stage, StepRecord, Trainer};
use stereoseg::rng;

/// Verdict of one criterion and the measured values behind it.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("ac01", ac01_reproducibility_statement),
    ("ac02", ac02_gradient_suite),
    ("ac03", ac03_warp_oracle),
    ("ac04", ac04_loss_zero_points),
    ("ac05", ac05_single_batch_overfit),
    ("ac06", ac06_synthetic_depth_accuracy),
    ("ac07", ac07_joint_training_does_not_hurt_segmentation),
    ("ac08", ac08_shape_and_normalisation_fuzz),
    ("ac09", ac09_reproducibility),
    ("ac10", ac10_schedule_closed_forms),
];

fn main() -> std::process::ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (key, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let id = key[2..].trim_start_matches('0');
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "AC{id} {verdict} {}", result.detail);
        let _ = out.flush();
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        let _ = writeln!(out, "{failed} acceptance criteria failed");
        std::process::ExitCode::FAILURE
    }
}

fn losses(r: &[StepRecord]) -> Vec<f64> {
    r.iter().map(|s| s.losses.total).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ac01_reproducibility_statement() -> Outcome {
    outcome(
        true,
        "the original cadaver recordings are not public, so Dice and Wilcoxon results on them cannot be \
         reproduced; AC2 to AC10 substitute property-based and synthetic-oracle checks"
            .into(),
    )
}

fn ac02_gradient_suite() -> Outcome {
    let cfg = GradCheckConfig::default();
    assert_eq!((cfg.step, cfg.tolerance, cfg.size), (1e-5, 1e-3, 6));
    assert!(cfg.instances >= 20);
    let t0 = Instant::now();
    let outcomes = gradcheck::run_all(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let required = ["seg_loss", "appearance_loss", "lr_consistency_loss", "smoothness_loss", "warp_horizontal"];
    let covered = required.iter().all(|n| outcomes.iter().any(|o| o.name == *n && o.instances >= 20));
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let pass = covered && outcomes.iter().all(|o| o.passed) && elapsed < Duration::from_secs(120);
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    outcome(
        pass,
        format!(
            "{} functions, all five required terms covered: {covered}, failing {failing:?}, max rel error {worst:.2e}, {:.1}s",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Per-pixel bilinear sample at `x + sign·d·W`, clamped to the border.
fn warp_oracle(src: &ImageGrid, d: &DisparityMap, sign: f64) -> Vec<f64> {
    let (h, w, c) = src.shape();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let xs = (x as f64 + sign * d.get(y, x) * w as f64).clamp(0.0, (w - 1) as f64);
            let x0 = xs.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let t = xs - x0 as f64;
            for ch in 0..c {
                out.push((1.0 - t) * src.get(y, x0, ch) + t * src.get(y, x1, ch));
            }
        }
    }
    out
}

fn ac03_warp_oracle() -> Outcome {
    let mut r = rng::derive(3, &[]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (r.random_range(4..=16), r.random_range(4..=16));
        let c = if r.random_bool(0.5) { 1 } else { 3 };
        let src = ImageGrid::from_fn(h, w, c, |_, _, _| r.random());
        let d = DisparityMap::from_fn(h, w, |_, _| r.random_range(-0.6..0.6));
        for dir in [Direction::Plus, Direction::Minus] {
            let got = warp_horizontal(&src, &d, dir).unwrap();
            worst = worst.max(max_abs_diff(got.data(), &warp_oracle(&src, &d, dir.sign())));
        }
        let zero = DisparityMap::filled(h, w, 0.0);
        for dir in [Direction::Plus, Direction::Minus] {
            assert_eq!(warp_horizontal(&src, &zero, dir).unwrap().data(), src.data());
        }
    }
    let pass = worst <= 1e-6;
    outcome(pass, format!("100 cases, max deviation {worst:.2e}, zero disparity exact"))
}

fn ac04_loss_zero_points() -> Outcome {
    let mut r = rng::derive(4, &[]);
    let (h, w) = (12, 16);
    let img = ImageGrid::from_fn(h, w, 3, |_, _, _| r.random());
    let zero = DisparityMap::filled(h, w, 0.0);
    let gamma = DepthLossWeights::default().gamma;
    let mut values = Vec::new();
    for side in [Side::Left, Side::Right] {
        values.push(("appearance", appearance_loss(&img, &img, &zero, side, gamma).unwrap()));
    }
    let mask = LabelMask::from_fn(h, w, |y, x| Class::from_index((y / 3 + x / 4) % NUM_CLASSES).unwrap());
    values.push(("seg", seg_loss(&mask, &SegMap::one_hot(&mask), &SegLossWeights::default()).unwrap()));
    let flat = DisparityMap::filled(h, w, 0.07);
    values.push(("smoothness", smoothness_loss(&img, &flat).unwrap()));
    for side in [Side::Left, Side::Right] {
        values.push(("lr_consistency", lr_consistency_loss(&flat, &flat, side).unwrap()));
    }
    let worst = values.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let pass = worst <= 1e-6;
    let summary: Vec<String> = values.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect();
    outcome(pass, format!("max |loss| {worst:.2e} ({})", summary.join(", ")))
}

fn ac05_single_batch_overfit() -> Outcome {
    let (stereo, labeled, cfg) = overfit_fixture(Stage::Finetune);
    assert_eq!(labeled.len(), 2);
    let init = Model::build(&cfg.model, cfg.seed).unwrap();
    let t0 = Instant::now();
    let mut t = Trainer::finetune(cfg, &init, stereo, labeled).unwrap();
    let steps = losses(&t.run_steps(500).unwrap());
    let elapsed = t0.elapsed();
    let (first, last) = (steps[0], steps[steps.len() - 1]);
    let reduction = 1.0 - last / first;
    let pass = reduction >= 0.95 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!("joint loss {first:.4} -> {last:.4} ({:.1}% reduction) in {:.0}s", 100.0 * reduction, elapsed.as_secs_f64()),
    )
}

const DESK_SIZE: usize = 64;
/// Error threshold as a fraction of each scene's disparity range. The single
/// calibration run of this exact configuration measured 0.072.
const AC6_THRESHOLD: f64 = 0.15;
/// Base width of the tiny encoder used for the joint-training comparison.
const AC7_BASE: usize = 16;

/// Depth pre-training on 200 routine synthetic pairs.
fn pretrain_routine(base_channels: usize, epochs: u32) -> Model {
    let train: Vec<_> = routine_samples(DESK_SIZE, 1, 200).into_iter().map(|s| s.stereo).collect();
    let mut cfg = RunConfig::for_stage(Stage::Pretrain);
    cfg.seed = 11;
    cfg.model = ModelConfig::tiny(DESK_SIZE, base_channels);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg.train.lr_initial = 1e-3;
    cfg.train.lr_schedule = LrSchedule::Constant;
    let mut t = Trainer::pretrain(cfg, train).unwrap();
    t.run().unwrap();
    t.into_state().model
}

fn ac06_synthetic_depth_accuracy() -> Outcome {
    let t0 = Instant::now();
    let model = &pretrain_routine(8, 20);
    let held_out = routine_samples(DESK_SIZE, 2, 20);
    let mut ratios = Vec::new();
    for s in &held_out {
        let pred = model.infer_depth(&s.stereo.left).unwrap();
        let (mae_px, _) = depth_accuracy(&pred, &s.gt_disparity_left, &s.valid).unwrap();
        ratios.push(mae_px / disparity_range_px(&s.gt_disparity_left, &s.valid).unwrap());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let pass = mean < AC6_THRESHOLD;
    outcome(
        pass,
        format!(
            "mean abs disparity error {:.1}% of the scene range over {} held-out scenes (threshold {:.0}%), {:.0}s",
            100.0 * mean,
            ratios.len(),
            100.0 * AC6_THRESHOLD,
            t0.elapsed().as_secs_f64()
        ),
    )
}

/// Exact two-sided signed-rank p-value by enumerating all sign patterns.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|v| {
            let below = d.iter().filter(|u| u.abs() < v.abs()).count() as f64;
            let tied = d.iter().filter(|u| u.abs() == v.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for signs in 0u64..1 << n {
        let wp: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if wp.min(total - wp) <= observed + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Wilcoxon p-values against scipy.stats.wilcoxon (exact method) and against
/// sign enumeration on rounded, tie-heavy data. Returns the worst deviation.
fn wilcoxon_oracle_deviation() -> f64 {
    const A: [f64; 15] = [
        0.4232, 0.5094, 0.6484, 0.3829, 0.7954, 0.5005, 0.5539, 0.0654, 0.8397, 0.1984, 0.7458, 0.5358, 0.7837,
        0.317, 0.2436,
    ];
    const B: [f64; 15] = [
        0.7682, 0.9171, 0.6914, 0.3645, 0.2073, 0.4402, 0.0288, 0.7749, 0.1967, 0.9503, 0.8582, 0.7063, 0.5187,
        0.5368, 0.5741,
    ];
    let mut worst = (wilcoxon_signed_rank(&A, &B).unwrap().p_value - 0.48870849609375).abs();
    let mut r = rng::derive(7, &[]);
    for _ in 0..20 {
        let n = r.random_range(8..=16);
        let a: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
        let b: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
        let Ok(t) = wilcoxon_signed_rank(&a, &b) else { continue };
        if t.all_zero {
            continue;
        }
        worst = worst.max((t.p_value - enumerated_p(&a, &b)).abs());
    }
    worst
}

fn ac07_joint_training_does_not_hurt_segmentation() -> Outcome {
    let oracle = wilcoxon_oracle_deviation();
    let t0 = Instant::now();
    // Base width 16: at width 8 the finest decoder row has too few channels
    // to carry both the last segmentation head and the full-resolution
    // disparity head.
    let init = &pretrain_routine(AC7_BASE, 5);
    let samples = knee_samples(DESK_SIZE, 31, 6, 4);
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().partition(|(_, g)| g != "knee4" && g != "knee5");
    let (stereo, labeled) = split(&train);
    let (_, held_out) = split(&test);
    let (mut joint, mut ablation) = (Vec::new(), Vec::new());
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let mut grand = [0.0; 2];
        for (k, depth_weight) in [1.0, 0.0].into_iter().enumerate() {
            let mut cfg = RunConfig::for_stage(Stage::Finetune);
            cfg.seed = 100 + seed;
            cfg.model = ModelConfig::tiny(DESK_SIZE, AC7_BASE);
            cfg.train.epochs = 20;
            cfg.train.batch_size = 2;
            cfg.train.lr_initial = 1e-3;
            cfg.train.depth_weight = depth_weight;
            let mut t = Trainer::finetune(cfg, init, stereo.clone(), labeled.clone()).unwrap();
            t.run().unwrap();
            let images = evaluate_segmentation(&t.state().model, &held_out, &format!("seed{seed}")).unwrap();
            grand[k] = DiceReport::from_images("arm", images.clone()).unwrap().grand.mean;
            if k == 0 { joint.extend(images) } else { ablation.extend(images) }
        }
        per_seed.push(format!("seed {seed}: {:.3} vs {:.3}", grand[0], grand[1]));
    }
    let joint = DiceReport::from_images("joint", joint).unwrap();
    let ablation = DiceReport::from_images("seg_only", ablation).unwrap();
    let result = ComparisonResult::from_reports(&joint, &ablation).unwrap();
    let stem = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ac07_comparison");
    let files = emit_report(&Report::Comparison { result: result.clone(), arms: vec![joint.clone(), ablation.clone()] }, &stem)
        .unwrap();
    let margin = joint.grand.mean - ablation.grand.mean;
    let pass = margin >= -0.02 && oracle <= 1e-6;
    outcome(
        pass,
        format!(
            "mean Dice joint {:.3} vs depth_weight=0 {:.3} (margin {margin:+.3}, floor -0.020) over 3 seeds [{}]; \
             Wilcoxon p {:.3}; oracle deviation {oracle:.1e}; table {}; {:.0}s",
            joint.grand.mean,
            ablation.grand.mean,
            per_seed.join("; "),
            result.p_value,
            files.table.display(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn ac08_shape_and_normalisation_fuzz() -> Outcome {
    let mut r = rng::derive(8, &[]);
    let sizes = [16, 32, 48, 64];
    let (mut passes, mut worst_sum) = (0usize, 0.0f64);
    let (mut d_lo, mut d_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut within = true;
    while passes < 1000 {
        let (h, w) = (sizes[r.random_range(0..4)], sizes[r.random_range(0..4)]);
        let mut cfg = ModelConfig::tiny(h, r.random_range(2..=4));
        cfg.input_size = [h, w];
        cfg.d_max = r.random_range(0.05..=0.5);
        let model = Model::build(&cfg, r.random()).unwrap();
        for _ in 0..5 {
            let scale: f64 = [0.0, 1.0, 5.0][r.random_range(0..3)];
            let batch: Vec<ImageGrid> = (0..r.random_range(1..=4))
                .map(|_| ImageGrid::from_fn(h, w, 3, |_, _, _| scale * r.random::<f64>()))
                .collect();
            let refs: Vec<&ImageGrid> = batch.iter().collect();
            for out in model.forward_batch(&refs).unwrap() {
                passes += 1;
                assert_eq!(out.seg_heads.len(), NUM_SEG_HEADS);
                for head in &out.seg_heads {
                    assert_eq!(head.shape(), (h, w));
                    for px in head.probs().chunks(NUM_CLASSES) {
                        worst_sum = worst_sum.max((px.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                for maps in [&out.pyramid.left, &out.pyramid.right] {
                    assert_eq!(maps.len(), NUM_SCALES);
                    for (s, m) in maps.iter().enumerate() {
                        assert_eq!(m.shape(), (h >> s, w >> s));
                        for &d in m.data() {
                            d_lo = d_lo.min(d / cfg.d_max);
                            d_hi = d_hi.max(d / cfg.d_max);
                            within &= d > 0.0 && d < cfg.d_max;
                        }
                    }
                }
            }
        }
    }
    let pass = worst_sum <= 1e-5 && within;
    outcome(
        pass,
        format!(
            "{passes} forward passes, max |sum-1| {worst_sum:.1e}, disparity/d_max in (0, 1) with margins {d_lo:.1e} and {:.1e}, shapes exact",
            1.0 - d_hi
        ),
    )
}

fn ac09_reproducibility() -> Outcome {
    let (stereo, labeled) = split(&knee_samples(32, 5, 1, 5));
    let mut cfg = tiny_config(Stage::Finetune, 32, 9);
    cfg.augment.depth.enabled = true;
    cfg.augment.seg.enabled = true;
    cfg.train.lr_schedule = LrSchedule::Polynomial { gamma: 0.9 };
    cfg.train.epochs = 20;
    let init = {
        let mut t = Trainer::pretrain(tiny_config(Stage::Pretrain, 32, 9), stereo.clone()).unwrap();
        t.run_steps(2).unwrap();
        t.into_state().model
    };
    let run = |threads: usize, steps: usize| {
        let mut c = cfg.clone();
        c.threads = threads;
        let mut t = Trainer::finetune(c, &init, stereo.clone(), labeled.clone()).unwrap();
        losses(&t.run_steps(steps).unwrap())
    };
    let reference = run(1, 14);
    let again = max_abs_diff(&reference[..10], &run(1, 10));
    let threaded = max_abs_diff(&reference[..10], &run(3, 10));

    let mut first = Trainer::finetune(cfg.clone(), &init, stereo.clone(), labeled.clone()).unwrap();
    first.run_steps(4).unwrap();
    let restored = checkpoint::from_bytes(&checkpoint::to_bytes(first.state())).unwrap();
    let mut resumed = Trainer::resume(restored, stereo, labeled).unwrap();
    let resume = max_abs_diff(&reference[4..], &losses(&resumed.run_steps(10).unwrap()));

    let pass = again <= 1e-6 && threaded <= 1e-6 && resume <= 1e-6;
    outcome(
        pass,
        format!("max loss deviation: rerun {again:.1e}, 1 vs 3 threads {threaded:.1e}, resume after 4 steps {resume:.1e}"),
    )
}

fn ac10_schedule_closed_forms() -> Outcome {
    let pre = RunConfig::for_stage(Stage::Pretrain).train;
    let fine = RunConfig::for_stage(Stage::Finetune).train;
    let lr0 = pre.lr_initial;
    let expect = [(0, lr0), (79, lr0), (80, lr0 / 2.0), (119, lr0 / 2.0), (120, lr0 / 4.0), (pre.epochs - 1, lr0 / 4.0)];
    let mut worst = 0.0f64;
    for (epoch, want) in expect {
        worst = worst.max((pre.lr_schedule.lr(lr0, epoch, pre.epochs) - want).abs());
    }
    let lr0 = fine.lr_initial;
    assert_eq!(fine.epochs % 2, 0);
    let half = fine.lr_schedule.lr(lr0, fine.epochs / 2, fine.epochs);
    worst = worst.max((half - lr0 * 0.5f64.powf(0.9)).abs());

    // the trainer applies the schedule per epoch
    let (stereo, _) = split(&knee_samples(32, 12, 1, 1));
    let mut cfg = tiny_config(Stage::Pretrain, 32, 12);
    cfg.model.base_channels = 2;
    cfg.train.batch_size = 1;
    cfg.train.epochs = pre.epochs;
    cfg.train.lr_initial = pre.lr_initial;
    cfg.train.lr_schedule = pre.lr_schedule.clone();
    let mut t = Trainer::pretrain(cfg, stereo).unwrap();
    assert_eq!(t.steps_per_epoch(), 1);
    let trace = t.run_steps(121).unwrap();
    for (epoch, want) in expect.iter().filter(|(e, _)| *e <= 120) {
        worst = worst.max((trace[*epoch as usize].lr - want).abs());
    }
    let pass = worst <= 1e-12;
    outcome(pass, format!("halving at 80 and 120, polynomial at T/2 = lr0*0.5^0.9, max deviation {worst:.1e}"))
}
