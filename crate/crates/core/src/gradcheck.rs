//! Central finite-difference verification of every analytic gradient in
//! [`crate::geometry`] and [`crate::losses`].
//!
//! Each check draws random 6×6 instances, perturbs every continuous input
//! coordinate by ±`step`, and compares the central difference to the
//! analytic derivative. Coordinates whose one-sided differences disagree
//! sharply sit on a kink (border clamp, interpolation cell edge, `|·|` at
//! zero) and are excluded and counted.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{
    ssim_map, ssim_map_backward, warp_horizontal, warp_horizontal_backward, Direction,
};
use crate::grid::{DisparityMap, ImageGrid, LabelMask, SegMap, NUM_CLASSES};
use crate::losses::{
    appearance_loss, appearance_loss_with_grad, lr_consistency_loss,
    lr_consistency_loss_with_grad, seg_loss_unchecked, seg_loss_with_grad, smoothness_loss,
    smoothness_loss_with_grad, SegLossWeights, Side,
};
use crate::rng;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-3,
            instances: 20,
            size: 6,
            seed: 20_240_901,
        }
    }
}

/// Result of checking one function over all instances.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub coords_checked: usize,
    pub coords_excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Denominator floor for relative errors of near-zero derivatives.
const REL_FLOOR: f64 = 1e-6;
/// One-sided slopes differing by more than this fraction mark a kink.
const KINK_RATIO: f64 = 0.1;

#[derive(Default)]
struct Tally {
    checked: usize,
    excluded: usize,
    max_rel: f64,
}

impl Tally {
    /// Compares `analytic` to finite differences of `f` around `x`.
    fn probe(&mut self, f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) {
        let f0 = f(x);
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            let fwd = (fp - f0) / step;
            let bwd = (f0 - fm) / step;
            if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()) && (fwd - bwd).abs() > 1e-7 {
                self.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(REL_FLOOR);
            self.max_rel = self.max_rel.max(rel);
            self.checked += 1;
        }
    }
}

fn rand_image(r: &mut rng::Rng, n: usize, c: usize) -> ImageGrid {
    ImageGrid::from_fn(n, n, c, |_, _, _| r.random_range(0.02..0.98))
}

/// Disparities whose sample positions stay clear of cell edges and of the
/// clamped border, for the given direction.
fn rand_disparity(r: &mut rng::Rng, n: usize, sign: f64) -> DisparityMap {
    DisparityMap::from_fn(n, n, |_, x| loop {
        let d: f64 = r.random_range(0.0..0.35);
        let pos = x as f64 + sign * d * n as f64;
        let frac = pos - pos.floor();
        let clear_edge = (0.08..0.92).contains(&frac);
        let inside = pos > 0.3 && pos < n as f64 - 1.3;
        // Samples well beyond the border are clamped and have a flat, smooth
        // neighbourhood, so they are valid probe points too.
        let outside = pos < -0.3 || pos > n as f64 - 0.7;
        if (clear_edge && inside) || outside {
            break d;
        }
    })
}

fn rand_probs(r: &mut rng::Rng, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels * NUM_CLASSES);
    for _ in 0..pixels {
        let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

fn image_from(shape: (usize, usize, usize), v: &[f64]) -> ImageGrid {
    ImageGrid::new(shape.0, shape.1, shape.2, v.to_vec()).expect("probe image")
}

fn disp_from(shape: (usize, usize), v: &[f64]) -> DisparityMap {
    DisparityMap::new(shape.0, shape.1, v.to_vec()).expect("probe disparity")
}

fn finish(name: &'static str, cfg: &GradCheckConfig, t: Tally, start: Instant) -> CheckOutcome {
    CheckOutcome {
        name,
        instances: cfg.instances,
        coords_checked: t.checked,
        coords_excluded: t.excluded,
        max_rel_error: t.max_rel,
        passed: t.checked > 0 && t.max_rel <= cfg.tolerance,
        elapsed: start.elapsed(),
    }
}

pub fn check_seg_loss(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("seg_loss")]);
    let n = cfg.size;
    let w = SegLossWeights::default();
    let mut t = Tally::default();
    for _ in 0..cfg.instances {
        let mask = LabelMask::new(n, n, (0..n * n).map(|_| r.random_range(0..NUM_CLASSES as u8)).collect())?;
        let probs = rand_probs(&mut r, n * n);
        let pred = SegMap::new(n, n, probs.clone())?;
        let (_, g) = seg_loss_with_grad(&mask, &pred, &w)?;
        let f = |v: &[f64]| {
            seg_loss_unchecked(&mask, &SegMap::unchecked(n, n, v.to_vec()).expect("shape"), &w)
                .expect("seg loss")
        };
        t.probe(&f, &probs, &g, cfg.step);
    }
    Ok(finish("seg_loss", cfg, t, start))
}

pub fn check_appearance_loss(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("appearance_loss")]);
    let n = cfg.size;
    let gamma = 0.85;
    let mut t = Tally::default();
    for k in 0..cfg.instances {
        let side = if k % 2 == 0 { Side::Left } else { Side::Right };
        let left = rand_image(&mut r, n, 3);
        let right = rand_image(&mut r, n, 3);
        let d = rand_disparity(&mut r, n, side.direction().sign());
        let g = appearance_loss_with_grad(&left, &right, &d, side, gamma)?;
        let shape = left.shape();

        let f = |v: &[f64]| appearance_loss(&image_from(shape, v), &right, &d, side, gamma).expect("ap");
        t.probe(&f, left.data(), g.left.data(), cfg.step);
        let f = |v: &[f64]| appearance_loss(&left, &image_from(shape, v), &d, side, gamma).expect("ap");
        t.probe(&f, right.data(), g.right.data(), cfg.step);
        let f = |v: &[f64]| appearance_loss(&left, &right, &disp_from((n, n), v), side, gamma).expect("ap");
        t.probe(&f, d.data(), g.disparity.data(), cfg.step);
    }
    Ok(finish("appearance_loss", cfg, t, start))
}

pub fn check_lr_consistency_loss(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("lr_consistency_loss")]);
    let n = cfg.size;
    let mut t = Tally::default();
    for k in 0..cfg.instances {
        let side = if k % 2 == 0 { Side::Left } else { Side::Right };
        // the sampling field of the left term is d_r (+), of the right term d_l (−)
        let (d_l, d_r) = match side {
            Side::Left => (rand_disparity(&mut r, n, 1.0), rand_disparity(&mut r, n, 1.0)),
            Side::Right => (rand_disparity(&mut r, n, -1.0), rand_disparity(&mut r, n, -1.0)),
        };
        let (_, g_l, g_r) = lr_consistency_loss_with_grad(&d_l, &d_r, side)?;
        let f = |v: &[f64]| lr_consistency_loss(&disp_from((n, n), v), &d_r, side).expect("lr");
        t.probe(&f, d_l.data(), g_l.data(), cfg.step);
        let f = |v: &[f64]| lr_consistency_loss(&d_l, &disp_from((n, n), v), side).expect("lr");
        t.probe(&f, d_r.data(), g_r.data(), cfg.step);
    }
    Ok(finish("lr_consistency_loss", cfg, t, start))
}

pub fn check_smoothness_loss(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("smoothness_loss")]);
    let n = cfg.size;
    let mut t = Tally::default();
    for _ in 0..cfg.instances {
        let img = rand_image(&mut r, n, 3);
        let d = DisparityMap::from_fn(n, n, |_, _| r.random_range(0.0..0.3));
        let (_, g_img, g_d) = smoothness_loss_with_grad(&img, &d)?;
        let shape = img.shape();
        let f = |v: &[f64]| smoothness_loss(&image_from(shape, v), &d).expect("ds");
        t.probe(&f, img.data(), g_img.data(), cfg.step);
        let f = |v: &[f64]| smoothness_loss(&img, &disp_from((n, n), v)).expect("ds");
        t.probe(&f, d.data(), g_d.data(), cfg.step);
    }
    Ok(finish("smoothness_loss", cfg, t, start))
}

pub fn check_warp_horizontal(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("warp_horizontal")]);
    let n = cfg.size;
    let mut t = Tally::default();
    for k in 0..cfg.instances {
        let dir = if k % 2 == 0 { Direction::Plus } else { Direction::Minus };
        let src = rand_image(&mut r, n, 3);
        let d = rand_disparity(&mut r, n, dir.sign());
        let weights = ImageGrid::from_fn(n, n, 3, |_, _, _| r.random_range(-1.0..1.0));
        let (g_src, g_d) = warp_horizontal_backward(&src, &d, dir, &weights)?;
        let dot = |img: &ImageGrid| -> f64 {
            img.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let shape = src.shape();
        let f = |v: &[f64]| dot(&warp_horizontal(&image_from(shape, v), &d, dir).expect("warp"));
        t.probe(&f, src.data(), g_src.data(), cfg.step);
        let f = |v: &[f64]| dot(&warp_horizontal(&src, &disp_from((n, n), v), dir).expect("warp"));
        t.probe(&f, d.data(), g_d.data(), cfg.step);
    }
    Ok(finish("warp_horizontal", cfg, t, start))
}

pub fn check_ssim_map(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut r = rng::derive(cfg.seed, &[rng::tag("ssim_map")]);
    let n = cfg.size;
    let mut t = Tally::default();
    for _ in 0..cfg.instances {
        let a = rand_image(&mut r, n, 3);
        let b = rand_image(&mut r, n, 3);
        let weights = ImageGrid::from_fn(n, n, 1, |_, _, _| r.random_range(-1.0..1.0));
        let (ga, gb) = ssim_map_backward(&a, &b, &weights)?;
        let dot = |img: &ImageGrid| -> f64 {
            img.data().iter().zip(weights.data()).map(|(x, y)| x * y).sum()
        };
        let shape = a.shape();
        let f = |v: &[f64]| dot(&ssim_map(&image_from(shape, v), &b).expect("ssim"));
        t.probe(&f, a.data(), ga.data(), cfg.step);
        let f = |v: &[f64]| dot(&ssim_map(&a, &image_from(shape, v)).expect("ssim"));
        t.probe(&f, b.data(), gb.data(), cfg.step);
    }
    Ok(finish("ssim_map", cfg, t, start))
}

/// Runs every check in a fixed order.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_seg_loss(cfg)?,
        check_appearance_loss(cfg)?,
        check_lr_consistency_loss(cfg)?,
        check_smoothness_loss(cfg)?,
        check_warp_horizontal(cfg)?,
        check_ssim_map(cfg)?,
    ])
}

/// Human-readable pass/fail table.
pub fn format_table(outcomes: &[CheckOutcome], cfg: &GradCheckConfig) -> String {
    let mut s = format!(
        "{:<22} {:>9} {:>8} {:>8} {:>12} {:>8}  status (tol {:.0e}, step {:.0e})\n",
        "function", "instances", "checked", "excluded", "max rel err", "ms", cfg.tolerance, cfg.step
    );
    for o in outcomes {
        s.push_str(&format!(
            "{:<22} {:>9} {:>8} {:>8} {:>12.3e} {:>8}  {}\n",
            o.name,
            o.instances,
            o.coords_checked,
            o.coords_excluded,
            o.max_rel_error,
            o.elapsed.as_millis(),
            if o.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
