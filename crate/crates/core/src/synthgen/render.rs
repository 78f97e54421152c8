//! Two-camera ray casting of primitive scenes.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::noise::fractal_noise;
use crate::data::{LabeledSample, StereoSample};
use crate::error::{Error, Result};
use crate::grid::{Class, DisparityMap, ImageGrid, LabelMask};
use crate::rng;

/// Geometry of one primitive in left-camera coordinates (metres, `+Z`
/// forward, `+Y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `Z = z`.
    FrontoPlane { z: f64 },
    /// `Z = z0 + slope_x * X + slope_y * Y`.
    SlantedPlane { z0: f64, slope_x: f64, slope_y: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

/// Procedural surface appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub albedo: [f64; 3],
    /// Base lattice frequency in cycles per metre.
    pub frequency: f64,
    pub octaves: u32,
    /// 0 gives a flat colour, 1 full-range modulation.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Optional world-space clip `[x_min, x_max, y_min, y_max]` for planes.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
    pub texture: Texture,
    pub class: Class,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub ambient: f64,
    /// Unit vector pointing towards the light.
    pub direction: [f64; 3],
    /// Radial fall-off strength; 0 disables the vignette.
    pub vignette: f64,
    /// Standard deviation of additive sensor noise.
    pub noise_std: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting {
            ambient: 0.35,
            direction: normalize([0.3, -0.5, -1.0]),
            vignette: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Complete description of one synthetic stereo frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    /// Grouping used for cross-validation folds.
    pub group_id: String,
    pub frame_index: u32,
    pub focal_px: f64,
    pub baseline_m: f64,
    /// `(H, W)`.
    pub image_size: [usize; 2],
    /// Painted in order: later primitives cover earlier ones.
    pub primitives: Vec<Primitive>,
    pub lighting: Lighting,
    /// Largest admissible disparity in fractions of the width.
    pub d_max: f64,
}

/// Rendered frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub stereo: StereoSample,
    /// Left-view disparity in fractions of the width.
    pub gt_disparity_left: DisparityMap,
    pub mask_left: LabelMask,
    /// Left pixels whose correspondence is visible in the right view.
    pub valid: Vec<bool>,
}

impl SyntheticSample {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The left view with its label mask, attributed to `group`.
    pub fn labeled(&self, group: &str) -> LabeledSample {
        LabeledSample {
            image: self.stereo.left.clone(),
            mask: self.mask_left.clone(),
            knee_id: group.to_string(),
            frame_index: self.stereo.frame_index,
        }
    }
}

struct Hit {
    prim: usize,
    depth: f64,
    point: [f64; 3],
    normal: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    v.map(|c| c / n)
}

fn intersect(p: &Primitive, origin_x: f64, ray: [f64; 3]) -> Option<(f64, [f64; 3], [f64; 3])> {
    let o = [origin_x, 0.0, 0.0];
    let (t, normal) = match p.shape {
        Shape::FrontoPlane { z } => (z, [0.0, 0.0, -1.0]),
        Shape::SlantedPlane { z0, slope_x, slope_y } => {
            let den = 1.0 - slope_x * ray[0] - slope_y * ray[1];
            if den.abs() < 1e-12 {
                return None;
            }
            (
                (z0 + slope_x * origin_x) / den,
                normalize([slope_x, slope_y, -1.0]),
            )
        }
        Shape::Sphere { center, radius } => {
            let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let a = dot(ray, ray);
            let b = 2.0 * dot(oc, ray);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let pt = [o[0] + t * ray[0], o[1] + t * ray[1], o[2] + t * ray[2]];
            let n = normalize([pt[0] - center[0], pt[1] - center[1], pt[2] - center[2]]);
            (t, n)
        }
    };
    if t <= 1e-9 {
        return None;
    }
    let pt = [o[0] + t * ray[0], o[1] + t * ray[1], t];
    if let Some([x0, x1, y0, y1]) = p.extent {
        if pt[0] < x0 || pt[0] > x1 || pt[1] < y0 || pt[1] > y1 {
            return None;
        }
    }
    Some((t, pt, normal))
}

impl SceneSpec {
    /// Checks parameter ranges and that every left pixel sees a surface
    /// whose disparity does not exceed `d_max * W` pixels.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let bad = |m: String| Err(Error::Contract(format!("scene {}: {m}", self.scene_id)));
        if h < 2 || w < 2 {
            return bad(format!("image size {h}x{w} too small"));
        }
        if !(self.focal_px > 0.0 && self.baseline_m > 0.0) {
            return bad("focal length and baseline must be positive".into());
        }
        if self.primitives.is_empty() {
            return bad("no primitives".into());
        }
        Ok(())
    }

    fn ray(&self, y: f64, x: f64) -> [f64; 3] {
        let [h, w] = self.image_size;
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        [(x - cx) / self.focal_px, (y - cy) / self.focal_px, 1.0]
    }

    /// Nearest-in-paint-order surface along the ray through image point
    /// `(y, x)` (pixel centres at integer coordinates).
    fn cast(&self, origin_x: f64, y: f64, x: f64) -> Option<Hit> {
        let ray = self.ray(y, x);
        let mut best = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((depth, point, normal)) = intersect(p, origin_x, ray) {
                best = Some(Hit { prim: i, depth, point, normal });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, y: f64, x: f64) -> [f64; 3] {
        let p = &self.primitives[hit.prim];
        let t = &p.texture;
        let mut n = hit.normal;
        if n[2] > 0.0 {
            n = n.map(|c| -c);
        }
        let l = &self.lighting;
        let lambert = dot(n, l.direction).max(0.0);
        let shade = l.ambient + (1.0 - l.ambient) * lambert;
        let [h, w] = self.image_size;
        let ry = (y - (h as f64 - 1.0) / 2.0) / (h as f64 / 2.0);
        let rx = (x - (w as f64 - 1.0) / 2.0) / (w as f64 / 2.0);
        let vig = 1.0 - l.vignette * (rx * rx + ry * ry) / 2.0;
        let q = hit.point.map(|c| c * t.frequency);
        std::array::from_fn(|k| {
            let tex = fractal_noise(t.seed.wrapping_add(k as u64 * 7919), q, t.octaves);
            let v = t.albedo[k] * (1.0 - t.contrast + t.contrast * tex) * shade * vig;
            v.clamp(0.0, 1.0)
        })
    }
}

/// Sub-pixel rays per axis; pixel intensities are the box-filtered mean
/// over the pixel footprint, which keeps textures band-limited enough for
/// bilinear resampling to reproduce the other view.
pub const SUPERSAMPLE: usize = 4;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders the left camera at the origin and the right camera at
/// `X = -baseline`, so a left pixel at column `x` reappears at
/// `x + f*B/Z` in the right view. Geometry, labels and ground truth come
/// from the ray through the pixel centre; intensities are averaged over
/// [`SUPERSAMPLE`]² sub-pixel rays and quantised to 8 bits.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    let [h, w] = spec.image_size;
    let fb = spec.focal_px * spec.baseline_m;
    let mut left_hits = Vec::with_capacity(h * w);
    let mut right_hits = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let hit = spec
                .cast(0.0, yf, xf)
                .ok_or_else(|| Error::Contract(format!("scene {}: left pixel ({y},{x}) sees no surface", spec.scene_id)))?;
            left_hits.push(hit);
            right_hits.push(spec.cast(-spec.baseline_m, yf, xf));
        }
    }
    let max_px = left_hits.iter().map(|hh| fb / hh.depth).fold(0.0, f64::max);
    if max_px > spec.d_max * w as f64 {
        return Err(Error::Contract(format!(
            "scene {}: disparity {max_px:.3} px exceeds d_max * W = {:.3} px",
            spec.scene_id,
            spec.d_max * w as f64
        )));
    }

    let mut noise_rng = rng::derive(seed, &[rng::tag("sensor-noise"), rng::tag(&spec.scene_id)]);
    let normal = Normal::new(0.0, spec.lighting.noise_std.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let offsets: Vec<f64> = (0..SUPERSAMPLE).map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5).collect();
    let mut render_view = |origin_x: f64| -> ImageGrid {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0.0; 3];
                for &dy in &offsets {
                    for &dx in &offsets {
                        let (yf, xf) = (y as f64 + dy, x as f64 + dx);
                        if let Some(hit) = spec.cast(origin_x, yf, xf) {
                            let c = spec.shade(&hit, yf, xf);
                            (0..3).for_each(|k| rgb[k] += c[k]);
                        }
                    }
                }
                for v in rgb.map(|v| v / (SUPERSAMPLE * SUPERSAMPLE) as f64) {
                    let noisy = if spec.lighting.noise_std > 0.0 { v + normal.sample(&mut noise_rng) } else { v };
                    data.push(quantize(noisy));
                }
            }
        }
        ImageGrid::new(h, w, 3, data).expect("rendered image")
    };
    let left = render_view(0.0);
    let right = render_view(-spec.baseline_m);

    let gt = DisparityMap::from_fn(h, w, |y, x| fb / left_hits[y * w + x].depth / w as f64);
    let mask = LabelMask::from_fn(h, w, |y, x| spec.primitives[left_hits[y * w + x].prim].class);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = &left_hits[y * w + x];
            let xr = x as f64 + fb / hit.depth;
            if xr > (w - 1) as f64 {
                continue;
            }
            let x0 = xr.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            valid[y * w + x] = [x0, x1].iter().all(|&xt| {
                right_hits[y * w + xt]
                    .as_ref()
                    .is_some_and(|r| r.prim == hit.prim && (r.depth - hit.depth).abs() <= 0.02 * hit.depth)
            });
        }
    }
    Ok(SyntheticSample {
        stereo: StereoSample {
            left,
            right,
            scene_id: spec.scene_id.clone(),
            frame_index: spec.frame_index,
        },
        gt_disparity_left: gt,
        mask_left: mask,
        valid,
    })
}
