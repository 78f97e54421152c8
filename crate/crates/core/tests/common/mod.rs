//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use stereoseg::data::{LabeledSample, StereoSample};
use stereoseg::model::ModelConfig;
use stereoseg::pipeline::{LrSchedule, RunConfig, Stage};
use stereoseg::synthgen::{knee_scene, render, routine_scene, SyntheticSample};

pub fn knee_samples(size: usize, seed: u64, groups: u32, per_group: u32) -> Vec<(SyntheticSample, String)> {
    let mut out = Vec::new();
    for g in 0..groups {
        for i in 0..per_group {
            let spec = knee_scene(size, seed, g, i);
            out.push((render(&spec, seed).unwrap(), spec.group_id.clone()));
        }
    }
    out
}

pub fn routine_samples(size: usize, seed: u64, n: u32) -> Vec<SyntheticSample> {
    (0..n).map(|i| render(&routine_scene(size, seed, i), seed).unwrap()).collect()
}

pub fn split(samples: &[(SyntheticSample, String)]) -> (Vec<StereoSample>, Vec<LabeledSample>) {
    let stereo = samples.iter().map(|(s, _)| s.stereo.clone()).collect();
    let labeled = samples.iter().map(|(s, g)| s.labeled(g)).collect();
    (stereo, labeled)
}

/// Small, augmentation-free configuration for fast runs.
pub fn tiny_config(stage: Stage, size: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::for_stage(stage);
    c.seed = seed;
    c.model = ModelConfig::tiny(size, 4);
    c.train.epochs = 1000;
    c.train.batch_size = 2;
    c.train.lr_initial = 1e-3;
    c.train.lr_schedule = LrSchedule::Constant;
    c.augment.depth.enabled = false;
    c.augment.seg.enabled = false;
    c
}

/// Occlusion-free labelled scenes: every structure is a textured patch on
/// one fronto-parallel plane, so the photometric loss can reach (almost)
/// zero at the true disparity.
pub fn coplanar_samples(size: usize, seed: u64, n: u32, freq: f64) -> Vec<(SyntheticSample, String)> {
    use rand::Rng as _;
    use stereoseg::grid::Class;
    use stereoseg::synthgen::{Lighting, Primitive, SceneSpec, Shape, Texture};
    (0..n)
        .map(|i| {
            let mut r = stereoseg::rng::derive(seed, &[i as u64]);
            let z: f64 = r.random_range(0.7..1.0);
            let half = 0.5 * z;
            let mut tex = |albedo: [f64; 3]| Texture {
                seed: r.random(),
                albedo,
                frequency: freq,
                octaves: 2,
                contrast: 0.6,
            };
            let mut prims = vec![Primitive {
                shape: Shape::FrontoPlane { z },
                extent: None,
                texture: tex([0.7, 0.4, 0.35]),
                class: Class::Background,
            }];
            let boxes = [[-0.8, -0.1, -0.8, -0.1], [0.1, 0.8, -0.8, -0.1], [-0.8, -0.1, 0.1, 0.8], [0.1, 0.8, 0.1, 0.8]];
            let albedo = [[0.85, 0.8, 0.7], [0.6, 0.75, 0.5], [0.9, 0.6, 0.6], [0.5, 0.5, 0.85]];
            for (k, class) in Class::FOREGROUND.into_iter().enumerate() {
                let b = boxes[k].map(|v: f64| v * half);
                prims.push(Primitive {
                    shape: Shape::FrontoPlane { z },
                    extent: Some(b),
                    texture: tex(albedo[k]),
                    class,
                });
            }
            let spec = SceneSpec {
                scene_id: format!("coplanar_{i:03}"),
                group_id: "coplanar".into(),
                frame_index: i,
                focal_px: size as f64,
                baseline_m: 0.05,
                image_size: [size, size],
                primitives: prims,
                lighting: Lighting::default(),
                d_max: 0.3,
            };
            (render(&spec, seed).unwrap(), spec.group_id)
        })
        .collect()
}

/// Image size of the overfit fixtures. Below this the photometric loss at
/// the true disparity is too large a fraction of the initial loss for the
/// overfit targets to be meaningful.
pub const OVERFIT_SIZE: usize = 64;

/// Two coplanar labelled samples and a configuration that overfits them.
pub fn overfit_fixture(stage: Stage) -> (Vec<StereoSample>, Vec<LabeledSample>, RunConfig) {
    let (stereo, labeled) = split(&coplanar_samples(OVERFIT_SIZE, 6, 2, 5.0));
    let mut cfg = tiny_config(stage, OVERFIT_SIZE, 13);
    cfg.model = ModelConfig::tiny(OVERFIT_SIZE, 8);
    cfg.train.lr_initial = 2e-3;
    (stereo, labeled, cfg)
}
