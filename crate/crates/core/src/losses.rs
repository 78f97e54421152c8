//! Training objectives: the supervised segmentation loss and the
//! multi-scale self-supervised stereo loss (appearance, left-right
//! consistency, edge-aware smoothness).
//!
//! Losses are evaluated in `f64` and each comes with an analytic gradient
//! with respect to its continuous inputs. The trainer feeds the disparity
//! and probability gradients back into the network's tape.

use serde::{Deserialize, Serialize};

use crate::data::StereoSample;
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    grad_x, grad_x_backward, grad_y, grad_y_backward, ssim_map, ssim_map_backward,
    warp_disparity, warp_disparity_backward, warp_horizontal, warp_horizontal_backward,
    Direction, Plane,
};
use crate::grid::{DisparityMap, ImageGrid, LabelMask, SegMap, NUM_CLASSES};

/// Number of disparity scales supervised by the depth loss.
pub const NUM_SCALES: usize = 4;
/// Probability floor inside the log of the cross entropy.
pub const CE_CLAMP: f64 = 1e-7;
/// Smoothing added to the numerator and denominator of soft Dice.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Number of segmentation heads averaged by the loss.
pub const NUM_SEG_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegLossWeights {
    pub alpha_ce: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        SegLossWeights { alpha_ce: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthLossWeights {
    pub alpha_ap: f64,
    pub alpha_lr: f64,
    pub alpha_ds: f64,
    /// Balance between the SSIM and L1 parts of the appearance term.
    pub gamma: f64,
}

impl Default for DepthLossWeights {
    fn default() -> Self {
        DepthLossWeights {
            alpha_ap: 1.0,
            alpha_lr: 1.0,
            alpha_ds: 0.1,
            gamma: 0.85,
        }
    }
}

impl DepthLossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha_ap >= 0.0 && self.alpha_lr >= 0.0 && self.alpha_ds >= 0.0,
            "depth loss weights must be non-negative: {self:?}"
        );
        ensure!(
            (0.0..=1.0).contains(&self.gamma),
            "gamma must lie in [0,1], got {}",
            self.gamma
        );
        Ok(())
    }
}

/// Which view a depth-loss term is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    /// Direction used when reconstructing this side from the other view.
    pub fn direction(self) -> Direction {
        match self {
            Side::Left => Direction::Plus,
            Side::Right => Direction::Minus,
        }
    }
}

/// Left and right disparity maps at four successively halved scales.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityPyramid {
    pub left: Vec<DisparityMap>,
    pub right: Vec<DisparityMap>,
}

impl DisparityPyramid {
    pub fn new(left: Vec<DisparityMap>, right: Vec<DisparityMap>) -> Result<Self> {
        let p = DisparityPyramid { left, right };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.left.len() == NUM_SCALES && self.right.len() == NUM_SCALES,
            "disparity pyramid needs {NUM_SCALES} scales per side, got {} / {}",
            self.left.len(),
            self.right.len()
        );
        let (h0, w0) = self.left[0].shape();
        for i in 0..NUM_SCALES {
            let want = (h0 >> i, w0 >> i);
            ensure!(
                self.left[i].shape() == want && self.right[i].shape() == want,
                "pyramid scale {i} should be {want:?}, got {:?} / {:?}",
                self.left[i].shape(),
                self.right[i].shape()
            );
        }
        Ok(())
    }

    /// Constant disparity at every scale.
    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        let maps: Vec<_> = (0..NUM_SCALES)
            .map(|i| DisparityMap::filled(h >> i, w >> i, value))
            .collect();
        DisparityPyramid {
            left: maps.clone(),
            right: maps,
        }
    }

    pub fn side(&self, side: Side) -> &[DisparityMap] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// Stereo pair at the four loss scales.
#[derive(Clone, Debug)]
pub struct StereoPyramid {
    pub left: Vec<ImageGrid>,
    pub right: Vec<ImageGrid>,
}

impl StereoPyramid {
    /// Repeated 2× bilinear downsampling of both views.
    pub fn build(pair: &StereoSample) -> Result<Self> {
        let mut left = vec![pair.left.clone()];
        let mut right = vec![pair.right.clone()];
        for i in 1..NUM_SCALES {
            left.push(left[i - 1].downsample2()?);
            right.push(right[i - 1].downsample2()?);
        }
        Ok(StereoPyramid { left, right })
    }

    pub fn image(&self, side: Side, scale: usize) -> &ImageGrid {
        match side {
            Side::Left => &self.left[scale],
            Side::Right => &self.right[scale],
        }
    }
}

fn check_plane(op: &'static str, img: &ImageGrid, d: &DisparityMap) -> Result<()> {
    if (img.height(), img.width()) != d.shape() {
        return Err(Error::shape(
            op,
            format!("{}x{}", img.height(), img.width()),
            format!("{}x{}", d.height(), d.width()),
        ));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Elementwise mean of the four segmentation heads.
pub fn average_seg_heads(heads: &[SegMap]) -> Result<SegMap> {
    ensure!(
        heads.len() == NUM_SEG_HEADS,
        "expected {NUM_SEG_HEADS} segmentation heads, got {}",
        heads.len()
    );
    let (h, w) = heads[0].shape();
    for head in heads {
        if head.shape() != (h, w) {
            return Err(Error::shape(
                "average_seg_heads",
                format!("{h}x{w}"),
                format!("{:?}", head.shape()),
            ));
        }
    }
    let n = heads.len() as f64;
    let mut probs = vec![0.0; h * w * NUM_CLASSES];
    for head in heads {
        for (acc, p) in probs.iter_mut().zip(head.probs()) {
            *acc += p;
        }
    }
    probs.iter_mut().for_each(|p| *p /= n);
    SegMap::new(h, w, probs)
}

/// Cross-entropy and soft-Dice parts of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossParts {
    pub cross_entropy: f64,
    pub dice: f64,
    pub total: f64,
}

fn seg_loss_eval(
    annotation: &LabelMask,
    pred: &SegMap,
    weights: &SegLossWeights,
    grad: Option<&mut [f64]>,
) -> Result<SegLossParts> {
    if annotation.shape() != pred.shape() {
        return Err(Error::shape(
            "seg_loss",
            format!("{:?}", annotation.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let p = pred.probs();
    let labels = annotation.labels();
    let npix = labels.len() as f64;

    let mut ce = 0.0;
    let mut inter = [0.0; NUM_CLASSES];
    let mut psum = [0.0; NUM_CLASSES];
    let mut gsum = [0.0; NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        let row = &p[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        ce -= row[l as usize].max(CE_CLAMP).ln();
        inter[l as usize] += row[l as usize];
        gsum[l as usize] += 1.0;
        for k in 0..NUM_CLASSES {
            psum[k] += row[k];
        }
    }
    ce /= npix;

    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&k| gsum[k] > 0.0).collect();
    let nk = present.len() as f64;
    let mut dice = 0.0;
    let mut den = [0.0; NUM_CLASSES];
    let mut num = [0.0; NUM_CLASSES];
    for &k in &present {
        num[k] = 2.0 * inter[k] + DICE_SMOOTH;
        den[k] = psum[k] + gsum[k] + DICE_SMOOTH;
        dice += num[k] / den[k];
    }
    dice /= nk;

    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v = 0.0);
        for (i, &l) in labels.iter().enumerate() {
            let base = i * NUM_CLASSES;
            let pl = p[base + l as usize];
            if pl > CE_CLAMP {
                g[base + l as usize] -= weights.alpha_ce / (npix * pl);
            }
            for &k in &present {
                let gk = if l as usize == k { 1.0 } else { 0.0 };
                let d_dice = (2.0 * gk * den[k] - num[k]) / (den[k] * den[k]);
                g[base + k] -= d_dice / nk;
            }
        }
    }

    let total = weights.alpha_ce * ce + (1.0 - dice);
    Ok(SegLossParts {
        cross_entropy: ce,
        dice,
        total,
    })
}

/// `alpha_ce · CE + (1 − soft Dice)` between a hard annotation and
/// (averaged) class probabilities.
pub fn seg_loss(annotation: &LabelMask, prediction: &SegMap, weights: &SegLossWeights) -> Result<f64> {
    prediction.check_normalized()?;
    Ok(seg_loss_eval(annotation, prediction, weights, None)?.total)
}

/// Loss parts plus gradient with respect to every prediction probability
/// (same layout as [`SegMap::probs`]).
pub fn seg_loss_with_grad(
    annotation: &LabelMask,
    prediction: &SegMap,
    weights: &SegLossWeights,
) -> Result<(SegLossParts, Vec<f64>)> {
    prediction.check_normalized()?;
    let mut g = vec![0.0; prediction.probs().len()];
    let parts = seg_loss_eval(annotation, prediction, weights, Some(&mut g))?;
    Ok((parts, g))
}

/// Evaluates the loss without the normalisation precondition; used when
/// probing single probabilities with finite differences.
pub fn seg_loss_unchecked(
    annotation: &LabelMask,
    prediction: &SegMap,
    weights: &SegLossWeights,
) -> Result<f64> {
    Ok(seg_loss_eval(annotation, prediction, weights, None)?.total)
}

// ---------------------------------------------------------------------------
// Depth terms
// ---------------------------------------------------------------------------

fn reconstruct(left: &ImageGrid, right: &ImageGrid, d: &DisparityMap, side: Side) -> Result<ImageGrid> {
    match side {
        Side::Left => warp_horizontal(right, d, Direction::Plus),
        Side::Right => warp_horizontal(left, d, Direction::Minus),
    }
}

/// Gradients of the appearance term.
#[derive(Clone, Debug)]
pub struct AppearanceGrad {
    pub value: f64,
    pub left: ImageGrid,
    pub right: ImageGrid,
    pub disparity: DisparityMap,
}

fn check_appearance(left: &ImageGrid, right: &ImageGrid, d: &DisparityMap, gamma: f64) -> Result<()> {
    if left.shape() != right.shape() {
        return Err(Error::shape(
            "appearance_loss",
            format!("{:?}", left.shape()),
            format!("{:?}", right.shape()),
        ));
    }
    check_plane("appearance_loss", left, d)?;
    ensure!((0.0..=1.0).contains(&gamma), "gamma must lie in [0,1], got {gamma}");
    Ok(())
}

/// Photometric reconstruction error of one view:
/// mean over pixels of `γ(1 − SSIM)/2 + (1 − γ)|I − Ĩ|`.
pub fn appearance_loss(
    left: &ImageGrid,
    right: &ImageGrid,
    d: &DisparityMap,
    side: Side,
    gamma: f64,
) -> Result<f64> {
    check_appearance(left, right, d, gamma)?;
    let target = match side {
        Side::Left => left,
        Side::Right => right,
    };
    let recon = reconstruct(left, right, d, side)?;
    let ssim = ssim_map(target, &recon)?;
    let (h, w, c) = target.shape();
    let npix = (h * w) as f64;
    let ssim_part: f64 = ssim.data().iter().map(|s| (1.0 - s) / 2.0).sum::<f64>() / npix;
    let l1: f64 = target
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (npix * c as f64);
    Ok(gamma * ssim_part + (1.0 - gamma) * l1)
}

pub fn appearance_loss_with_grad(
    left: &ImageGrid,
    right: &ImageGrid,
    d: &DisparityMap,
    side: Side,
    gamma: f64,
) -> Result<AppearanceGrad> {
    let value = appearance_loss(left, right, d, side, gamma)?;
    let (target, source) = match side {
        Side::Left => (left, right),
        Side::Right => (right, left),
    };
    let recon = reconstruct(left, right, d, side)?;
    let (h, w, c) = target.shape();
    let npix = (h * w) as f64;

    let g_ssim = ImageGrid::from_raw(h, w, 1, vec![-gamma / (2.0 * npix); h * w]);
    let (mut g_target, mut g_recon) = ssim_map_backward(target, &recon, &g_ssim)?;
    let l1_scale = (1.0 - gamma) / (npix * c as f64);
    for ((gt, gr), (a, b)) in g_target
        .data_mut()
        .iter_mut()
        .zip(g_recon.data_mut().iter_mut())
        .zip(target.data().iter().zip(recon.data()))
    {
        let s = sign(a - b) * l1_scale;
        *gt += s;
        *gr -= s;
    }
    let (g_source, g_disp) = warp_horizontal_backward(source, d, side.direction(), &g_recon)?;
    let (g_left, g_right) = match side {
        Side::Left => (g_target, g_source),
        Side::Right => (g_source, g_target),
    };
    Ok(AppearanceGrad {
        value,
        left: g_left,
        right: g_right,
        disparity: g_disp,
    })
}

fn lr_parts<'a>(side: Side, d_l: &'a DisparityMap, d_r: &'a DisparityMap) -> (&'a DisparityMap, &'a DisparityMap) {
    match side {
        Side::Left => (d_l, d_r),
        Side::Right => (d_r, d_l),
    }
}

fn check_lr(d_l: &DisparityMap, d_r: &DisparityMap) -> Result<()> {
    if d_l.shape() != d_r.shape() {
        return Err(Error::shape(
            "lr_consistency_loss",
            format!("{:?}", d_l.shape()),
            format!("{:?}", d_r.shape()),
        ));
    }
    Ok(())
}

/// Left-right consistency: for the left side, mean of
/// `|d_l(ω) − d_l(ω + d_r(ω)·W)|`; the right side mirrors it with
/// `|d_r(ω) − d_r(ω − d_l(ω)·W)|`.
pub fn lr_consistency_loss(d_l: &DisparityMap, d_r: &DisparityMap, side: Side) -> Result<f64> {
    check_lr(d_l, d_r)?;
    let (field, by) = lr_parts(side, d_l, d_r);
    let warped = warp_disparity(field, by, side.direction())?;
    let n = field.data().len() as f64;
    Ok(field
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Value and gradients (d/d d_l, d/d d_r) of [`lr_consistency_loss`].
pub fn lr_consistency_loss_with_grad(
    d_l: &DisparityMap,
    d_r: &DisparityMap,
    side: Side,
) -> Result<(f64, DisparityMap, DisparityMap)> {
    check_lr(d_l, d_r)?;
    let (field, by) = lr_parts(side, d_l, d_r);
    let warped = warp_disparity(field, by, side.direction())?;
    let n = field.data().len() as f64;
    let mut value = 0.0;
    let mut g_direct = vec![0.0; field.data().len()];
    let mut g_warped = vec![0.0; field.data().len()];
    for (i, (a, b)) in field.data().iter().zip(warped.data()).enumerate() {
        value += (a - b).abs();
        let s = sign(a - b) / n;
        g_direct[i] = s;
        g_warped[i] = -s;
    }
    value /= n;
    let (mut g_field, g_by) = warp_disparity_backward(field, by, side.direction(), &g_warped)?;
    for (g, d) in g_field.data_mut().iter_mut().zip(&g_direct) {
        *g += d;
    }
    Ok(match side {
        Side::Left => (value, g_field, g_by),
        Side::Right => (value, g_by, g_field),
    })
}

/// Mean absolute channel value of an image gradient at each pixel.
fn channel_mean_abs(g: &ImageGrid) -> Vec<f64> {
    let c = g.channels();
    g.data()
        .chunks(c)
        .map(|px| px.iter().map(|v| v.abs()).sum::<f64>() / c as f64)
        .collect()
}

/// Edge-aware smoothness: mean of
/// `|∂x d|·exp(−‖∂x I‖) + |∂y d|·exp(−‖∂y I‖)`.
pub fn smoothness_loss(image: &ImageGrid, d: &DisparityMap) -> Result<f64> {
    Ok(smoothness_eval(image, d, false)?.0)
}

/// Value and gradients (d/d image, d/d disparity) of [`smoothness_loss`].
pub fn smoothness_loss_with_grad(
    image: &ImageGrid,
    d: &DisparityMap,
) -> Result<(f64, ImageGrid, DisparityMap)> {
    let (v, gi, gd) = smoothness_eval(image, d, true)?;
    Ok((v, gi.expect("gradient requested"), gd.expect("gradient requested")))
}

type SmoothnessOut = (f64, Option<ImageGrid>, Option<DisparityMap>);

fn smoothness_eval(image: &ImageGrid, d: &DisparityMap, want_grad: bool) -> Result<SmoothnessOut> {
    check_plane("smoothness_loss", image, d)?;
    let (h, w, c) = image.shape();
    let n = (h * w) as f64;
    let dx = grad_x(d);
    let dy = grad_y(d);
    let ix = grad_x(image);
    let iy = grad_y(image);
    let ex: Vec<f64> = channel_mean_abs(&ix).iter().map(|v| (-v).exp()).collect();
    let ey: Vec<f64> = channel_mean_abs(&iy).iter().map(|v| (-v).exp()).collect();

    let mut value = 0.0;
    for p in 0..h * w {
        value += dx.data()[p].abs() * ex[p] + dy.data()[p].abs() * ey[p];
    }
    value /= n;
    if !want_grad {
        return Ok((value, None, None));
    }

    let up_dx: Vec<f64> = (0..h * w).map(|p| sign(dx.data()[p]) * ex[p] / n).collect();
    let up_dy: Vec<f64> = (0..h * w).map(|p| sign(dy.data()[p]) * ey[p] / n).collect();
    let gx = grad_x_backward((h, w, 1), &up_dx);
    let gy = grad_y_backward((h, w, 1), &up_dy);
    let g_d: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a + b).collect();

    // d/dI of exp(−mean_c |∂I|) = −exp(..)·sign(∂I)/C
    let mut up_ix = vec![0.0; h * w * c];
    let mut up_iy = vec![0.0; h * w * c];
    for p in 0..h * w {
        let ax = dx.data()[p].abs() * ex[p] / (n * c as f64);
        let ay = dy.data()[p].abs() * ey[p] / (n * c as f64);
        for ch in 0..c {
            up_ix[p * c + ch] = -ax * sign(ix.values()[p * c + ch]);
            up_iy[p * c + ch] = -ay * sign(iy.values()[p * c + ch]);
        }
    }
    let gix = grad_x_backward((h, w, c), &up_ix);
    let giy = grad_y_backward((h, w, c), &up_iy);
    let g_img: Vec<f64> = gix.iter().zip(&giy).map(|(a, b)| a + b).collect();
    Ok((
        value,
        Some(ImageGrid::from_raw(h, w, c, g_img)),
        Some(DisparityMap::from_raw(h, w, g_d)),
    ))
}

// ---------------------------------------------------------------------------
// Multi-scale stereo loss
// ---------------------------------------------------------------------------

/// The 24 constituent terms of the depth loss, unweighted.
/// Indexing: `[scale][side]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthLossTerms {
    pub appearance: [[f64; 2]; NUM_SCALES],
    pub lr: [[f64; 2]; NUM_SCALES],
    pub smoothness: [[f64; 2]; NUM_SCALES],
}

impl DepthLossTerms {
    pub fn weighted_total(&self, w: &DepthLossWeights) -> f64 {
        let mut total = 0.0;
        for i in 0..NUM_SCALES {
            total += w.alpha_ap * (self.appearance[i][0] + self.appearance[i][1])
                + w.alpha_lr * (self.lr[i][0] + self.lr[i][1])
                + w.alpha_ds * (self.smoothness[i][0] + self.smoothness[i][1]);
        }
        total
    }

    pub fn appearance_sum(&self) -> f64 {
        self.appearance.iter().flatten().sum()
    }
    pub fn lr_sum(&self) -> f64 {
        self.lr.iter().flatten().sum()
    }
    pub fn smoothness_sum(&self) -> f64 {
        self.smoothness.iter().flatten().sum()
    }
}

fn check_pyramids(images: &StereoPyramid, pyramid: &DisparityPyramid) -> Result<()> {
    pyramid.validate()?;
    ensure!(
        images.left.len() == NUM_SCALES && images.right.len() == NUM_SCALES,
        "image pyramid needs {NUM_SCALES} scales"
    );
    for i in 0..NUM_SCALES {
        check_plane("depth_loss", &images.left[i], &pyramid.left[i])?;
        check_plane("depth_loss", &images.right[i], &pyramid.right[i])?;
    }
    Ok(())
}

/// Unweighted per-scale, per-side terms.
pub fn depth_loss_terms(
    images: &StereoPyramid,
    pyramid: &DisparityPyramid,
    gamma: f64,
) -> Result<DepthLossTerms> {
    check_pyramids(images, pyramid)?;
    let mut t = DepthLossTerms::default();
    for i in 0..NUM_SCALES {
        let (l, r) = (&images.left[i], &images.right[i]);
        let (dl, dr) = (&pyramid.left[i], &pyramid.right[i]);
        for side in Side::BOTH {
            let s = side.index();
            let d = &pyramid.side(side)[i];
            t.appearance[i][s] = appearance_loss(l, r, d, side, gamma)?;
            t.lr[i][s] = lr_consistency_loss(dl, dr, side)?;
            t.smoothness[i][s] = smoothness_loss(images.image(side, i), d)?;
        }
    }
    Ok(t)
}

/// Full weighted stereo loss of one sample.
pub fn depth_loss(pair: &StereoSample, pyramid: &DisparityPyramid, weights: &DepthLossWeights) -> Result<f64> {
    weights.validate()?;
    let images = StereoPyramid::build(pair)?;
    Ok(depth_loss_terms(&images, pyramid, weights.gamma)?.weighted_total(weights))
}

/// Terms plus the gradient of the weighted total with respect to every
/// disparity in the pyramid.
pub fn depth_loss_with_grad(
    images: &StereoPyramid,
    pyramid: &DisparityPyramid,
    weights: &DepthLossWeights,
) -> Result<(DepthLossTerms, DisparityPyramid)> {
    weights.validate()?;
    check_pyramids(images, pyramid)?;
    let mut t = DepthLossTerms::default();
    let mut g_left = Vec::with_capacity(NUM_SCALES);
    let mut g_right = Vec::with_capacity(NUM_SCALES);
    for i in 0..NUM_SCALES {
        let (l, r) = (&images.left[i], &images.right[i]);
        let (dl, dr) = (&pyramid.left[i], &pyramid.right[i]);
        let (h, w) = dl.shape();
        let mut gl = vec![0.0; h * w];
        let mut gr = vec![0.0; h * w];
        for side in Side::BOTH {
            let s = side.index();
            let d = &pyramid.side(side)[i];
            let g_own = if side == Side::Left { &mut gl } else { &mut gr };

            if weights.alpha_ap > 0.0 {
                let ap = appearance_loss_with_grad(l, r, d, side, weights.gamma)?;
                t.appearance[i][s] = ap.value;
                axpy(g_own, weights.alpha_ap, ap.disparity.data());
            } else {
                t.appearance[i][s] = appearance_loss(l, r, d, side, weights.gamma)?;
            }

            let ds = smoothness_loss_with_grad(images.image(side, i), d)?;
            t.smoothness[i][s] = ds.0;
            axpy(g_own, weights.alpha_ds, ds.2.data());

            let (v, g_dl, g_dr) = lr_consistency_loss_with_grad(dl, dr, side)?;
            t.lr[i][s] = v;
            axpy(&mut gl, weights.alpha_lr, g_dl.data());
            axpy(&mut gr, weights.alpha_lr, g_dr.data());
        }
        g_left.push(DisparityMap::from_raw(h, w, gl));
        g_right.push(DisparityMap::from_raw(h, w, gr));
    }
    Ok((
        t,
        DisparityPyramid {
            left: g_left,
            right: g_right,
        },
    ))
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Class;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    fn pair(left: ImageGrid, right: ImageGrid) -> StereoSample {
        StereoSample {
            left,
            right,
            scene_id: "t".into(),
            frame_index: 0,
        }
    }

    #[test]
    fn perfect_segmentation_is_near_zero() {
        let mask = LabelMask::from_fn(4, 4, |y, x| Class::from_index((x + y) % 5).unwrap());
        let pred = SegMap::one_hot(&mask);
        let w = SegLossWeights::default();
        let loss = seg_loss(&mask, &pred, &w).unwrap();
        assert!(loss <= w.alpha_ce * -(1.0f64 - 1e-7).ln() + 1e-5);
        assert!(loss >= 0.0);
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln5() {
        let mask = LabelMask::filled(3, 3, Class::Femur);
        let pred = SegMap::uniform(3, 3);
        let w = SegLossWeights::default();
        let (parts, _) = seg_loss_with_grad(&mask, &pred, &w).unwrap();
        assert!((parts.cross_entropy - 5.0f64.ln()).abs() < 1e-12);
        assert!((w.alpha_ce * parts.cross_entropy - 0.5 * 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_hand_evaluated() {
        // labels: [femur, femur; bg, bg]
        let mask = LabelMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let probs = vec![
            0.2, 0.8, 0.0, 0.0, 0.0, //
            0.4, 0.6, 0.0, 0.0, 0.0, //
            0.7, 0.3, 0.0, 0.0, 0.0, //
            0.9, 0.1, 0.0, 0.0, 0.0,
        ];
        let pred = SegMap::new(2, 2, probs).unwrap();
        // CE = -(ln .8 + ln .6 + ln .7 + ln .9)/4
        let ce = -(0.8f64.ln() + 0.6f64.ln() + 0.7f64.ln() + 0.9f64.ln()) / 4.0;
        // femur: I = 1.4, sum p = 1.8, G = 2 ; bg: I = 1.6, sum p = 2.2, G = 2
        let d_f = (2.0 * 1.4 + 1e-6) / (1.8 + 2.0 + 1e-6);
        let d_b = (2.0 * 1.6 + 1e-6) / (2.2 + 2.0 + 1e-6);
        let want = 0.5 * ce + 1.0 - (d_f + d_b) / 2.0;
        let got = seg_loss(&mask, &pred, &SegLossWeights::default()).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn seg_loss_rejects_unnormalised_rows() {
        let mask = LabelMask::filled(1, 1, Class::Background);
        let pred = SegMap::unchecked(1, 1, vec![0.5, 0.1, 0.1, 0.1, 0.1]).unwrap();
        assert!(seg_loss(&mask, &pred, &SegLossWeights::default()).is_err());
    }

    #[test]
    fn average_of_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heads: Vec<SegMap> = (0..4)
            .map(|_| {
                let mut probs = vec![];
                for _ in 0..6 {
                    let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
                    let s: f64 = raw.iter().sum();
                    probs.extend(raw.iter().map(|v| v / s));
                }
                SegMap::new(2, 3, probs).unwrap()
            })
            .collect();
        let avg = average_seg_heads(&heads).unwrap();
        avg.check_normalized().unwrap();
        for row in avg.probs().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let same = average_seg_heads(&vec![heads[0].clone(); 4]).unwrap();
        for (a, b) in same.probs().iter().zip(heads[0].probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        let one_hots: Vec<SegMap> = [Class::Femur, Class::Tibia, Class::Meniscus, Class::Acl]
            .iter()
            .map(|&c| SegMap::one_hot(&LabelMask::filled(1, 1, c)))
            .collect();
        let avg = average_seg_heads(&one_hots).unwrap();
        assert_eq!(avg.pixel(0, 0), &[0.0, 0.25, 0.25, 0.25, 0.25]);
        assert!(average_seg_heads(&heads[..3]).is_err());
    }

    #[test]
    fn appearance_zero_and_l1_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = rand_image(&mut rng, 6, 6, 3);
        let zero = DisparityMap::filled(6, 6, 0.0);
        for side in Side::BOTH {
            assert_eq!(appearance_loss(&img, &img, &zero, side, 0.85).unwrap(), 0.0);
        }
        let other = rand_image(&mut rng, 6, 6, 3);
        let d = DisparityMap::from_fn(6, 6, |_, _| rng.random_range(0.0..0.3));
        let recon = warp_horizontal(&other, &d, Direction::Plus).unwrap();
        let mae = img
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / img.data().len() as f64;
        let got = appearance_loss(&img, &other, &d, Side::Left, 0.0).unwrap();
        assert!((got - mae).abs() < 1e-14);
    }

    #[test]
    fn lr_consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = DisparityMap::filled(3, 5, 0.0);
        assert_eq!(lr_consistency_loss(&z, &z, Side::Left).unwrap(), 0.0);
        let c = DisparityMap::filled(3, 5, 0.13);
        let any = DisparityMap::from_fn(3, 5, |_, _| rng.random_range(0.0..0.4));
        assert!(lr_consistency_loss(&c, &any, Side::Left).unwrap().abs() < 1e-15);
        assert!(lr_consistency_loss(&any, &c, Side::Right).unwrap().abs() < 1e-15);
    }

    #[test]
    fn lr_consistency_one_row_hand_lookup() {
        // W = 4; d_r shifts in pixels: 1, 0.5, 0.25, 2
        let d_l = DisparityMap::new(1, 4, vec![0.1, 0.2, 0.4, 0.3]).unwrap();
        let d_r = DisparityMap::new(1, 4, vec![0.25, 0.125, 0.0625, 0.5]).unwrap();
        // positions: 1.0, 1.5, 2.25, 5 -> clamp 3
        let sampled = [0.2, 0.5 * 0.2 + 0.5 * 0.4, 0.75 * 0.4 + 0.25 * 0.3, 0.3];
        let want = [0.1f64, 0.2, 0.4, 0.3]
            .iter()
            .zip(sampled)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 4.0;
        let got = lr_consistency_loss(&d_l, &d_r, Side::Left).unwrap();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn smoothness_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = rand_image(&mut rng, 4, 4, 3);
        assert_eq!(smoothness_loss(&img, &DisparityMap::filled(4, 4, 0.2)).unwrap(), 0.0);
        // constant image, ramp d(y, x) = x / (W - 1), W = 4
        let flat = ImageGrid::filled(2, 4, 1, 0.5);
        let ramp = DisparityMap::from_fn(2, 4, |_, x| x as f64 / 3.0);
        assert!((smoothness_loss(&flat, &ramp).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = rand_image(&mut rng, 3, 3, 3);
        let d = DisparityMap::from_fn(3, 3, |_, _| rng.random::<f64>());
        let mut total = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                let (mut gx, mut gy) = (0.0, 0.0);
                if x < 2 {
                    let ix: f64 = (0..3).map(|c| (img.get(y, x + 1, c) - img.get(y, x, c)).abs()).sum::<f64>() / 3.0;
                    gx = (d.get(y, x + 1) - d.get(y, x)).abs() * (-ix).exp();
                }
                if y < 2 {
                    let iy: f64 = (0..3).map(|c| (img.get(y + 1, x, c) - img.get(y, x, c)).abs()).sum::<f64>() / 3.0;
                    gy = (d.get(y + 1, x) - d.get(y, x)).abs() * (-iy).exp();
                }
                total += gx + gy;
            }
        }
        let got = smoothness_loss(&img, &d).unwrap();
        assert!((got - total / 9.0).abs() < 1e-6);
    }

    #[test]
    fn depth_loss_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let img = rand_image(&mut rng, 16, 16, 3);
        let p = pair(img.clone(), img);
        let zero = DisparityPyramid::constant(16, 16, 0.0);
        assert_eq!(depth_loss(&p, &zero, &DepthLossWeights::default()).unwrap(), 0.0);

        let other = pair(rand_image(&mut rng, 16, 16, 3), rand_image(&mut rng, 16, 16, 3));
        let any = DisparityPyramid::constant(16, 16, 0.1);
        let w = DepthLossWeights {
            alpha_ap: 0.0,
            alpha_lr: 0.0,
            alpha_ds: 0.0,
            gamma: 0.85,
        };
        assert_eq!(depth_loss(&other, &any, &w).unwrap(), 0.0);
    }

    #[test]
    fn depth_loss_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = pair(rand_image(&mut rng, 16, 16, 3), rand_image(&mut rng, 16, 16, 3));
        let images = StereoPyramid::build(&p).unwrap();
        let maps = |rng: &mut ChaCha8Rng| -> Vec<DisparityMap> {
            (0..4)
                .map(|i| DisparityMap::from_fn(16 >> i, 16 >> i, |_, _| rng.random_range(0.0..0.2)))
                .collect()
        };
        let pyr = DisparityPyramid::new(maps(&mut rng), maps(&mut rng)).unwrap();
        let w = DepthLossWeights::default();
        let total = depth_loss(&p, &pyr, &w).unwrap();
        let mut explicit = 0.0;
        for i in 0..4 {
            for side in Side::BOTH {
                let d = &pyr.side(side)[i];
                explicit += w.alpha_ap
                    * appearance_loss(&images.left[i], &images.right[i], d, side, w.gamma).unwrap();
                explicit += w.alpha_lr * lr_consistency_loss(&pyr.left[i], &pyr.right[i], side).unwrap();
                explicit += w.alpha_ds * smoothness_loss(images.image(side, i), d).unwrap();
            }
        }
        assert!((total - explicit).abs() < 1e-9);
        let (terms, _) = depth_loss_with_grad(&images, &pyr, &w).unwrap();
        assert!((terms.weighted_total(&w) - total).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_rejects_wrong_scale_count() {
        let img = ImageGrid::filled(16, 16, 3, 0.5);
        let p = pair(img.clone(), img);
        let mut pyr = DisparityPyramid::constant(16, 16, 0.0);
        pyr.left.pop();
        assert!(depth_loss(&p, &pyr, &DepthLossWeights::default()).is_err());
    }

    #[test]
    fn seg_loss_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mask = LabelMask::from_fn(3, 3, |_, _| Class::from_index(rng.random_range(0..5)).unwrap());
        let mut probs = vec![];
        for _ in 0..9 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let pred = SegMap::new(3, 3, probs.clone()).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mask2 = LabelMask::new(3, 3, mask.labels().iter().map(|&l| perm[l as usize] as u8).collect()).unwrap();
        let mut probs2 = vec![0.0; probs.len()];
        for p in 0..9 {
            for k in 0..5 {
                probs2[p * 5 + perm[k]] = probs[p * 5 + k];
            }
        }
        let pred2 = SegMap::new(3, 3, probs2).unwrap();
        let w = SegLossWeights::default();
        let a = seg_loss(&mask, &pred, &w).unwrap();
        let b = seg_loss(&mask2, &pred2, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
