//! Random photometric and geometric augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::preprocess::sample_bilinear;
use super::{LabeledSample, StereoSample};
use crate::grid::{Class, ImageGrid, LabelMask};
use crate::rng::Rng;

/// Sampling ranges for stereo augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthAugConfig {
    pub enabled: bool,
    pub gamma: [f64; 2],
    /// Multiplicative brightness.
    pub brightness: [f64; 2],
    /// Per-channel multiplicative colour shift.
    pub color: [f64; 2],
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for DepthAugConfig {
    fn default() -> Self {
        DepthAugConfig {
            enabled: true,
            gamma: [0.8, 1.2],
            brightness: [0.5, 2.0],
            color: [0.8, 1.2],
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

/// One concrete draw of stereo augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthAugParams {
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
    pub hflip: bool,
    pub vflip: bool,
}

impl DepthAugParams {
    pub const IDENTITY: DepthAugParams = DepthAugParams {
        gamma: 1.0,
        brightness: 1.0,
        color: [1.0; 3],
        hflip: false,
        vflip: false,
    };

    pub fn sample(cfg: &DepthAugConfig, rng: &mut Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let mut uni = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        let gamma = uni(cfg.gamma);
        let brightness = uni(cfg.brightness);
        let color = [uni(cfg.color), uni(cfg.color), uni(cfg.color)];
        DepthAugParams {
            gamma,
            brightness,
            color,
            hflip: rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0)),
            vflip: rng.random_bool(cfg.vflip_prob.clamp(0.0, 1.0)),
        }
    }
}

fn photometric(img: &ImageGrid, p: &DepthAugParams) -> ImageGrid {
    let c = img.channels();
    let mut out = ImageGrid::from_fn(img.height(), img.width(), c, |y, x, ch| {
        img.get(y, x, ch).powf(p.gamma) * p.brightness * p.color[ch.min(2)]
    });
    out.clamp01();
    out
}

/// Applies the same photometric change to both views. A horizontal flip
/// mirrors both images and swaps them, so the mirrored right view becomes
/// the new left view and disparities keep their sign.
pub fn apply_depth_aug(sample: &StereoSample, p: &DepthAugParams) -> StereoSample {
    let mut left = photometric(&sample.left, p);
    let mut right = photometric(&sample.right, p);
    if p.hflip {
        let (l, r) = (right.flip_horizontal(), left.flip_horizontal());
        left = l;
        right = r;
    }
    if p.vflip {
        left = left.flip_vertical();
        right = right.flip_vertical();
    }
    StereoSample {
        left,
        right,
        scene_id: sample.scene_id.clone(),
        frame_index: sample.frame_index,
    }
}

pub fn augment_depth(sample: &StereoSample, cfg: &DepthAugConfig, rng: &mut Rng) -> StereoSample {
    apply_depth_aug(sample, &DepthAugParams::sample(cfg, rng))
}

/// Sampling ranges for segmentation augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegAugConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Additive brightness offset range.
    pub brightness: [f64; 2],
    /// Contrast factor range, applied around mid-grey.
    pub contrast: [f64; 2],
    pub elastic_prob: f64,
    /// Spacing of the random control grid in pixels.
    pub elastic_grid_px: f64,
    /// Maximum control-point displacement in pixels.
    pub elastic_amplitude_px: f64,
    /// Gaussian smoothing of the dense displacement in pixels.
    pub elastic_sigma_px: f64,
}

impl Default for SegAugConfig {
    fn default() -> Self {
        SegAugConfig {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: [-0.1, 0.1],
            contrast: [0.8, 1.2],
            elastic_prob: 0.5,
            elastic_grid_px: 64.0,
            elastic_amplitude_px: 10.0,
            elastic_sigma_px: 8.0,
        }
    }
}

/// Dense per-pixel displacement (in pixels) of the sampling position.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub h: usize,
    pub w: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl Displacement {
    /// Random control grid, bilinearly interpolated and Gaussian-smoothed.
    pub fn random(h: usize, w: usize, spacing: f64, amplitude: f64, sigma: f64, rng: &mut Rng) -> Self {
        let spacing = spacing.max(1.0);
        let gh = ((h - 1) as f64 / spacing).ceil() as usize + 1;
        let gw = ((w - 1) as f64 / spacing).ceil() as usize + 1;
        let mut draw = || -> Vec<f64> { (0..gh * gw).map(|_| rng.random_range(-amplitude..=amplitude)).collect() };
        let (cy, cx) = (draw(), draw());
        let dense = |ctrl: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                let fy = y as f64 / spacing;
                let y0 = (fy.floor() as usize).min(gh - 1);
                let y1 = (y0 + 1).min(gh - 1);
                let ly = fy - y0 as f64;
                for x in 0..w {
                    let fx = x as f64 / spacing;
                    let x0 = (fx.floor() as usize).min(gw - 1);
                    let x1 = (x0 + 1).min(gw - 1);
                    let lx = fx - x0 as f64;
                    let top = ctrl[y0 * gw + x0] * (1.0 - lx) + ctrl[y0 * gw + x1] * lx;
                    let bot = ctrl[y1 * gw + x0] * (1.0 - lx) + ctrl[y1 * gw + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
            gaussian_smooth(&out, h, w, sigma)
        };
        Displacement { h, w, dy: dense(&cy), dx: dense(&cx) }
    }
}

/// Separable Gaussian blur of a scalar field with border clamping.
pub(crate) fn gaussian_smooth(v: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return v.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|x| x / ks).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * v[y * w + (x as isize + i).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp[(y as isize + i).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// One concrete draw of segmentation augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegAugParams {
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub elastic: Option<Displacement>,
}

impl SegAugParams {
    pub const IDENTITY: SegAugParams = SegAugParams {
        hflip: false,
        vflip: false,
        brightness: 0.0,
        contrast: 1.0,
        elastic: None,
    };

    pub fn sample(cfg: &SegAugConfig, h: usize, w: usize, rng: &mut Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let hflip = rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0));
        let vflip = rng.random_bool(cfg.vflip_prob.clamp(0.0, 1.0));
        let mut uni = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        let brightness = uni(cfg.brightness);
        let contrast = uni(cfg.contrast);
        let elastic = rng.random_bool(cfg.elastic_prob.clamp(0.0, 1.0)).then(|| {
            Displacement::random(h, w, cfg.elastic_grid_px, cfg.elastic_amplitude_px, cfg.elastic_sigma_px, rng)
        });
        SegAugParams { hflip, vflip, brightness, contrast, elastic }
    }

    /// Source position `(y, x)` sampled by each output pixel: flips are
    /// applied to the output grid first, then the elastic displacement.
    pub fn source_coords(&self, h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let yy = if self.vflip { h - 1 - y } else { y };
                let xx = if self.hflip { w - 1 - x } else { x };
                let (mut sy, mut sx) = (yy as f64, xx as f64);
                if let Some(d) = &self.elastic {
                    sy += d.dy[yy * w + xx];
                    sx += d.dx[yy * w + xx];
                }
                out.push((sy, sx));
            }
        }
        out
    }
}

/// Applies geometric changes jointly (bilinear for the image, nearest for
/// the mask) and photometric changes to the image only.
pub fn apply_seg_aug(sample: &LabeledSample, p: &SegAugParams) -> LabeledSample {
    let (h, w, c) = sample.image.shape();
    let coords = p.source_coords(h, w);
    let mut image = ImageGrid::from_fn(h, w, c, |y, x, ch| {
        let (sy, sx) = coords[y * w + x];
        let v = sample_bilinear(&sample.image, sy, sx, ch);
        (v - 0.5) * p.contrast + 0.5 + p.brightness
    });
    image.clamp01();
    let mask = LabelMask::from_fn(h, w, |y, x| {
        let (sy, sx) = coords[y * w + x];
        let ny = sy.round().clamp(0.0, (h - 1) as f64) as usize;
        let nx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
        Class::from_index(sample.mask.get(ny, nx) as usize).expect("valid label")
    });
    LabeledSample {
        image,
        mask,
        knee_id: sample.knee_id.clone(),
        frame_index: sample.frame_index,
    }
}

pub fn augment_seg(sample: &LabeledSample, cfg: &SegAugConfig, rng: &mut Rng) -> LabeledSample {
    let (h, w) = sample.mask.shape();
    apply_seg_aug(sample, &SegAugParams::sample(cfg, h, w, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pair() -> StereoSample {
        let img = |s: usize| ImageGrid::from_fn(8, 10, 3, move |y, x, c| ((y * 7 + x * 3 + c + s) % 13) as f64 / 13.0);
        StereoSample { left: img(0), right: img(5), scene_id: "s".into(), frame_index: 0 }
    }

    fn labeled() -> LabeledSample {
        LabeledSample {
            image: ImageGrid::from_fn(12, 10, 3, |y, x, c| ((y * 5 + x * 2 + c) % 9) as f64 / 9.0),
            mask: LabelMask::from_fn(12, 10, |y, x| Class::from_index((y / 3 + x / 4) % 5).unwrap()),
            knee_id: "k".into(),
            frame_index: 3,
        }
    }

    #[test]
    fn identity_parameters_leave_samples_unchanged() {
        let p = pair();
        assert_eq!(apply_depth_aug(&p, &DepthAugParams::IDENTITY), p);
        let s = labeled();
        assert_eq!(apply_seg_aug(&s, &SegAugParams::IDENTITY), s);
    }

    #[test]
    fn gamma_closed_form() {
        let mut p = pair();
        p.left = ImageGrid::filled(4, 4, 3, 0.5);
        p.right = ImageGrid::filled(4, 4, 3, 0.5);
        let params = DepthAugParams { gamma: 0.8, ..DepthAugParams::IDENTITY };
        let out = apply_depth_aug(&p, &params);
        assert!(out.left.data().iter().all(|v| (v - 0.5f64.powf(0.8)).abs() < 1e-6));
    }

    #[test]
    fn horizontal_flip_swaps_and_mirrors() {
        let p = pair();
        let params = DepthAugParams { hflip: true, ..DepthAugParams::IDENTITY };
        let out = apply_depth_aug(&p, &params);
        assert_eq!(out.left, p.right.flip_horizontal());
        assert_eq!(out.right, p.left.flip_horizontal());
    }

    #[test]
    fn augmentation_is_a_function_of_the_seed() {
        let p = pair();
        let cfg = DepthAugConfig::default();
        let a = augment_depth(&p, &cfg, &mut rng::derive(5, &[1]));
        let b = augment_depth(&p, &cfg, &mut rng::derive(5, &[1]));
        assert_eq!(a, b);
        for v in a.left.data().iter().chain(a.right.data()) {
            assert!((0.0..=1.0).contains(v));
        }
        let s = labeled();
        let scfg = SegAugConfig { elastic_grid_px: 4.0, elastic_prob: 1.0, ..Default::default() };
        let a = augment_seg(&s, &scfg, &mut rng::derive(5, &[2]));
        let b = augment_seg(&s, &scfg, &mut rng::derive(5, &[2]));
        assert_eq!(a, b);
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let s = labeled();
        let p = SegAugParams { hflip: true, ..SegAugParams::IDENTITY };
        assert_eq!(apply_seg_aug(&apply_seg_aug(&s, &p), &p), s);
    }

    #[test]
    fn photometric_changes_never_touch_the_mask() {
        let s = labeled();
        let p = SegAugParams { brightness: 0.3, contrast: 0.5, ..SegAugParams::IDENTITY };
        let out = apply_seg_aug(&s, &p);
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.image, s.image);
    }

    #[test]
    fn image_and_mask_share_the_spatial_map() {
        // Channels 0 and 1 encode the source coordinates linearly, so the
        // bilinear image warp recovers the exact sampling position, which
        // must select the mask label.
        let (h, w) = (24, 20);
        let s = LabeledSample {
            image: ImageGrid::from_fn(h, w, 3, |y, x, c| match c {
                0 => y as f64 / (h - 1) as f64,
                1 => x as f64 / (w - 1) as f64,
                _ => 0.5,
            }),
            mask: LabelMask::from_fn(h, w, |y, x| Class::from_index((y * 3 + x) % 5).unwrap()),
            knee_id: "k".into(),
            frame_index: 0,
        };
        let cfg = SegAugConfig {
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
            elastic_prob: 1.0,
            elastic_grid_px: 6.0,
            elastic_amplitude_px: 3.0,
            elastic_sigma_px: 1.5,
            ..Default::default()
        };
        for seed in 0..5 {
            let out = augment_seg(&s, &cfg, &mut rng::derive(seed, &[]));
            let mut checked = 0;
            for y in 0..h {
                for x in 0..w {
                    let sy = out.image.get(y, x, 0) * (h - 1) as f64;
                    let sx = out.image.get(y, x, 1) * (w - 1) as f64;
                    // skip samples sitting on a rounding boundary
                    if (sy.fract() - 0.5).abs() < 1e-6 || (sx.fract() - 0.5).abs() < 1e-6 {
                        continue;
                    }
                    let want = s.mask.get(sy.round() as usize, sx.round() as usize);
                    assert_eq!(out.mask.get(y, x), want, "seed {seed} at ({y},{x})");
                    checked += 1;
                }
            }
            assert!(checked > h * w / 2);
        }
    }

    #[test]
    fn elastic_masks_keep_valid_labels() {
        let s = labeled();
        let cfg = SegAugConfig { elastic_prob: 1.0, elastic_grid_px: 3.0, elastic_amplitude_px: 4.0, ..Default::default() };
        for seed in 0..10 {
            let out = augment_seg(&s, &cfg, &mut rng::derive(seed, &[]));
            assert!(out.mask.labels().iter().all(|&v| v < 5));
        }
    }
}
