//! Label-preserving corruptions and on-disk dataset emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{render, SceneSpec, SyntheticSample};
use crate::data::io::{file_sha256, write_binary_mask, write_disparity, write_mask, write_rgb};
use crate::data::{class_presence_stats, gaussian_smooth, DatasetManifest, SegRecord, Split, StereoRecord};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::par;

/// Imaging failures applied identically to both views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// Intensities multiplied by `gain` and clipped.
    Overexposure { gain: f64 },
    /// Gaussian blur.
    Blur { sigma_px: f64 },
    /// Local contrast compressed towards a blurred copy.
    LowTexture { keep: f64, sigma_px: f64 },
}

impl Degradation {
    /// The default suite: one instance of each kind.
    pub fn suite() -> Vec<Degradation> {
        vec![
            Degradation::Overexposure { gain: 1.8 },
            Degradation::Blur { sigma_px: 1.0 },
            Degradation::LowTexture { keep: 0.35, sigma_px: 3.0 },
        ]
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Degradation::Overexposure { .. } => "overexposed",
            Degradation::Blur { .. } => "blurred",
            Degradation::LowTexture { .. } => "lowtexture",
        }
    }

    pub fn apply(&self, img: &ImageGrid) -> ImageGrid {
        let (h, w, c) = img.shape();
        let per_channel = |f: &dyn Fn(&[f64]) -> Vec<f64>| -> ImageGrid {
            let planes: Vec<Vec<f64>> = (0..c).map(|ch| f(img.channel(ch).data())).collect();
            ImageGrid::from_fn(h, w, c, |y, x, ch| planes[ch][y * w + x])
        };
        let mut out = match *self {
            Degradation::Overexposure { gain } => img.map(|v| v * gain),
            Degradation::Blur { sigma_px } => per_channel(&|p| gaussian_smooth(p, h, w, sigma_px)),
            Degradation::LowTexture { keep, sigma_px } => per_channel(&|p| {
                let m = gaussian_smooth(p, h, w, sigma_px);
                p.iter().zip(&m).map(|(v, m)| m + keep * (v - m)).collect()
            }),
        };
        out.clamp01();
        out.map(|v| (v * 255.0).round() / 255.0)
    }

    /// Corrupted copy sharing the ground truth of `s`.
    pub fn apply_sample(&self, s: &SyntheticSample) -> SyntheticSample {
        let mut out = s.clone();
        out.stereo.left = self.apply(&s.stereo.left);
        out.stereo.right = self.apply(&s.stereo.right);
        out.stereo.scene_id = format!("{}_{}", s.stereo.scene_id, self.tag());
        out
    }
}

/// What `emit_dataset` writes besides the stereo pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitOptions {
    pub seed: u64,
    pub write_stereo: bool,
    pub write_seg: bool,
    /// Corrupted copies added next to every clean sample.
    pub degradations: Vec<Degradation>,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            seed: 0,
            write_stereo: true,
            write_seg: true,
            degradations: Vec::new(),
        }
    }
}

/// Number of training records for `n` specs under `(train, test)`
/// fractions.
pub fn train_count(n: usize, split: [f64; 2]) -> usize {
    let total = split[0] + split[1];
    ((n as f64) * split[0] / total).round() as usize
}

/// Renders every spec and writes the dataset layout plus `manifest.json`
/// under `root`. The first `train_count` specs form the training split.
pub fn emit_dataset(specs: &[SceneSpec], root: &Path, split: [f64; 2], opts: &EmitOptions) -> Result<DatasetManifest> {
    if !(split[0] >= 0.0 && split[1] >= 0.0 && split[0] + split[1] > 0.0) {
        return Err(Error::Contract(format!("invalid split fractions {split:?}")));
    }
    let n_train = train_count(specs.len(), split);
    let rendered: Vec<Result<SyntheticSample>> = par::map_slice(specs, |s| render(s, opts.seed));
    let mut manifest = DatasetManifest::empty();
    let mut masks = Vec::new();
    for (i, (spec, sample)) in specs.iter().zip(rendered).enumerate() {
        let sample = sample?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        let frame = format!("{:04}", spec.frame_index);
        let scene_dir = format!("stereo/{}", spec.scene_id);
        let gt_rel = format!("{scene_dir}/{frame}_gtdisp.bin");
        let valid_rel = format!("{scene_dir}/{frame}_valid.png");
        let (h, w) = sample.gt_disparity_left.shape();
        if opts.write_stereo {
            write_disparity(&root.join(&gt_rel), &sample.gt_disparity_left)?;
            write_binary_mask(&root.join(&valid_rel), h, w, &sample.valid)?;
        }
        let mut variants = vec![(spec.scene_id.clone(), sample.clone())];
        for d in &opts.degradations {
            let s = d.apply_sample(&sample);
            variants.push((s.stereo.scene_id.clone(), s));
        }
        for (scene_id, s) in variants {
            if opts.write_stereo {
                let dir = format!("stereo/{scene_id}");
                let left = format!("{dir}/{frame}_L.png");
                let right = format!("{dir}/{frame}_R.png");
                write_rgb(&root.join(&left), &s.stereo.left)?;
                write_rgb(&root.join(&right), &s.stereo.right)?;
                manifest.stereo.push(StereoRecord {
                    scene_id: scene_id.clone(),
                    frame_index: spec.frame_index,
                    split,
                    left_sha256: file_sha256(&root.join(&left))?,
                    right_sha256: file_sha256(&root.join(&right))?,
                    left,
                    right,
                    gt_disparity: Some(gt_rel.clone()),
                    valid_mask: Some(valid_rel.clone()),
                });
            }
            if opts.write_seg {
                let suffix = scene_id.strip_prefix(&spec.scene_id).unwrap_or("");
                let dir = format!("seg/{}", spec.group_id);
                let image = format!("{dir}/{}{suffix}.png", spec.scene_id);
                let mask = format!("{dir}/{}{suffix}_mask.png", spec.scene_id);
                write_rgb(&root.join(&image), &s.stereo.left)?;
                write_mask(&root.join(&mask), &s.mask_left)?;
                manifest.seg.push(SegRecord {
                    knee_id: spec.group_id.clone(),
                    frame_index: spec.frame_index,
                    split,
                    image_sha256: file_sha256(&root.join(&image))?,
                    mask_sha256: file_sha256(&root.join(&mask))?,
                    image,
                    mask,
                });
                masks.push((spec.group_id.clone(), s.mask_left.clone()));
            }
        }
    }
    manifest.class_presence_stats = class_presence_stats(masks.iter().map(|(g, m)| (g.as_str(), m)));
    manifest.save(root)?;
    Ok(manifest)
}
