//! Random scene families.
//!
//! Both families use a focal length equal to the image width and a 5 cm
//! baseline, so normalised disparity is `0.05 / Z`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::{Lighting, Primitive, SceneSpec, Shape, Texture};
use crate::grid::Class;
use crate::rng::{self, Rng};

pub const BASELINE_M: f64 = 0.05;
/// Radius shared by all "routine" spheres, so apparent size encodes depth.
pub const ROUTINE_SPHERE_RADIUS: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    /// Clean, richly textured objects in front of a receding floor plane.
    Routine,
    /// Four structures plus background with a depth-correlated layout.
    KneeLike,
}

fn texture(r: &mut Rng, albedo: [f64; 3], jitter: f64, contrast: f64) -> Texture {
    Texture {
        seed: r.random(),
        albedo: albedo.map(|a| (a + r.random_range(-jitter..=jitter)).clamp(0.05, 1.0)),
        frequency: r.random_range(14.0..22.0),
        octaves: 3,
        contrast,
    }
}

fn base_spec(scene_id: String, group_id: String, frame_index: u32, size: usize, primitives: Vec<Primitive>) -> SceneSpec {
    SceneSpec {
        scene_id,
        group_id,
        frame_index,
        focal_px: size as f64,
        baseline_m: BASELINE_M,
        image_size: [size, size],
        primitives,
        lighting: Lighting::default(),
        d_max: 0.3,
    }
}

/// Floor-like slanted plane (nearer towards the bottom of the image) with
/// one to three equal-size spheres in front of it.
pub fn routine_scene(size: usize, seed: u64, index: u32) -> SceneSpec {
    let mut r = rng::derive(seed, &[rng::tag("routine"), index as u64]);
    let z0 = r.random_range(0.8..1.0);
    let slope_y = r.random_range(-0.8..-0.4);
    let mut prims = vec![Primitive {
        shape: Shape::SlantedPlane { z0, slope_x: r.random_range(-0.15..0.15), slope_y },
        extent: None,
        texture: {
            let a = [r.random_range(0.4..0.9), r.random_range(0.4..0.9), r.random_range(0.4..0.9)];
            let contrast = r.random_range(0.6..0.8);
            texture(&mut r, a, 0.0, contrast)
        },
        class: Class::Background,
    }];
    let n = r.random_range(1..=3);
    let mut spheres: Vec<(f64, Primitive)> = (0..n)
        .map(|k| {
            let z = r.random_range(0.3..0.6);
            let x = r.random_range(-0.3..0.3) * z;
            let y = r.random_range(-0.3..0.3) * z;
            let a = [r.random_range(0.4..1.0), r.random_range(0.4..1.0), r.random_range(0.4..1.0)];
            let class = Class::FOREGROUND[k % 4];
            let contrast = r.random_range(0.6..0.8);
            (
                z,
                Primitive {
                    shape: Shape::Sphere { center: [x, y, z], radius: ROUTINE_SPHERE_RADIUS },
                    extent: None,
                    texture: texture(&mut r, a, 0.0, contrast),
                    class,
                },
            )
        })
        .collect();
    spheres.sort_by(|a, b| b.0.total_cmp(&a.0));
    prims.extend(spheres.into_iter().map(|(_, p)| p));
    base_spec(format!("routine{index:04}"), format!("routine{index:04}"), index, size, prims)
}

/// Knee-like layout: far background wall, a deep small ACL blob, a tibial
/// plateau receding towards the image centre, a large near femoral condyle
/// on top and a small meniscus nearest to the camera. Structures share
/// similar pale textures, so depth is an informative cue for the labels.
pub fn knee_scene(size: usize, seed: u64, group: u32, index: u32) -> SceneSpec {
    let mut gr = rng::derive(seed, &[rng::tag("knee-group"), group as u64]);
    // group-level appearance bias, as if each cadaver looked different
    let tint: [f64; 3] = std::array::from_fn(|_| gr.random_range(-0.08..0.08));
    let mut r = rng::derive(seed, &[rng::tag("knee"), group as u64, index as u64]);
    let tinted = |a: [f64; 3]| -> [f64; 3] { std::array::from_fn(|k| a[k] + tint[k]) };
    let contrast = 0.45;

    let background = Primitive {
        shape: Shape::FrontoPlane { z: r.random_range(0.9..1.1) },
        extent: None,
        texture: texture(&mut r, tinted([0.72, 0.42, 0.38]), 0.05, contrast),
        class: Class::Background,
    };
    let acl_z = r.random_range(0.65..0.8);
    let acl = Primitive {
        shape: Shape::Sphere {
            center: [r.random_range(-0.08..0.08) * acl_z, r.random_range(-0.05..0.1) * acl_z, acl_z],
            radius: r.random_range(0.05..0.07),
        },
        extent: None,
        texture: texture(&mut r, tinted([0.78, 0.55, 0.5]), 0.05, contrast),
        class: Class::Acl,
    };
    let tib_top = r.random_range(0.02..0.1);
    let tibia = Primitive {
        shape: Shape::SlantedPlane {
            z0: r.random_range(0.5..0.6),
            slope_x: r.random_range(-0.2..0.2),
            slope_y: r.random_range(-0.9..-0.6),
        },
        extent: Some([-1.0, 1.0, tib_top, 1.0]),
        texture: texture(&mut r, tinted([0.82, 0.78, 0.7]), 0.04, contrast),
        class: Class::Tibia,
    };
    let fem_z = r.random_range(0.5..0.6);
    let femur = Primitive {
        shape: Shape::Sphere {
            center: [r.random_range(-0.15..0.15) * fem_z, r.random_range(-0.35..-0.2) * fem_z, fem_z],
            radius: r.random_range(0.17..0.22),
        },
        extent: None,
        texture: texture(&mut r, tinted([0.85, 0.8, 0.72]), 0.04, contrast),
        class: Class::Femur,
    };
    let men_z = r.random_range(0.33..0.4);
    let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let meniscus = Primitive {
        shape: Shape::Sphere {
            center: [side * r.random_range(0.15..0.3) * men_z, r.random_range(0.05..0.15) * men_z, men_z],
            radius: r.random_range(0.035..0.05),
        },
        extent: None,
        texture: texture(&mut r, tinted([0.86, 0.76, 0.7]), 0.04, contrast),
        class: Class::Meniscus,
    };
    base_spec(
        format!("knee{group}_{index:04}"),
        format!("knee{group}"),
        index,
        size,
        vec![background, acl, tibia, femur, meniscus],
    )
}

pub fn scene(family: SceneFamily, size: usize, seed: u64, group: u32, index: u32) -> SceneSpec {
    match family {
        SceneFamily::Routine => routine_scene(size, seed, index),
        SceneFamily::KneeLike => knee_scene(size, seed, group, index),
    }
}
