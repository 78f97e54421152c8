//! Synthetic rectified stereo scenes with exact disparity and labels.

mod emit;
mod noise;
mod render;
mod scenes;

pub use emit::{emit_dataset, train_count, Degradation, EmitOptions};
pub use noise::{fractal_noise, value_noise};
pub use render::{render, SUPERSAMPLE, Lighting, Primitive, SceneSpec, Shape, SyntheticSample, Texture};
pub use scenes::{knee_scene, routine_scene, scene, SceneFamily, BASELINE_M, ROUTINE_SPHERE_RADIUS};
