//! Plain value grids shared by every module: images, disparity maps,
//! label masks and per-pixel class probabilities.
//!
//! All grids are row-major. Multi-channel grids interleave channels
//! (`(y * w + x) * c + ch`).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Number of semantic classes.
pub const NUM_CLASSES: usize = 5;

/// Label set of the segmentation task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Femur = 1,
    Tibia = 2,
    Meniscus = 3,
    Acl = 4,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::Femur,
        Class::Tibia,
        Class::Meniscus,
        Class::Acl,
    ];

    /// The anatomical (non-background) classes, in report order.
    pub const FOREGROUND: [Class; 4] = [Class::Femur, Class::Tibia, Class::Meniscus, Class::Acl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Class> {
        Class::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Femur => "femur",
            Class::Tibia => "tibia",
            Class::Meniscus => "meniscus",
            Class::Acl => "acl",
        }
    }

    pub fn from_name(name: &str) -> Option<Class> {
        Class::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// H×W×C real-valued image. Channels are 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(h >= 2 && w >= 2, "image must be at least 2x2, got {h}x{w}");
        ensure!(c == 1 || c == 3, "image must have 1 or 3 channels, got {c}");
        if data.len() != h * w * c {
            return Err(Error::shape("ImageGrid::new", h * w * c, data.len()));
        }
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "image contains non-finite values"
        );
        Ok(ImageGrid { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        ImageGrid::new(h, w, c, vec![value; h * w * c]).expect("valid constant image")
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        ImageGrid::new(h, w, c, data).expect("from_fn produced an invalid image")
    }

    /// Builds a grid without the finiteness scan. Callers guarantee the
    /// invariants (used on hot paths where values come from finite math).
    pub(crate) fn from_raw(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w * c);
        ImageGrid { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid::from_raw(self.h, self.w, self.c, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mirror along the vertical axis (left-right flip).
    pub fn flip_horizontal(&self) -> ImageGrid {
        ImageGrid::from_fn(self.h, self.w, self.c, |y, x, ch| self.get(y, self.w - 1 - x, ch))
    }

    /// Mirror along the horizontal axis (up-down flip).
    pub fn flip_vertical(&self) -> ImageGrid {
        ImageGrid::from_fn(self.h, self.w, self.c, |y, x, ch| self.get(self.h - 1 - y, x, ch))
    }

    /// Exact 2× bilinear downsampling (half-pixel centres), which for a
    /// factor of two is the mean over each 2×2 block.
    pub fn downsample2(&self) -> Result<ImageGrid> {
        ensure!(
            self.h % 2 == 0 && self.w % 2 == 0,
            "downsample2 needs even dimensions, got {}x{}",
            self.h,
            self.w
        );
        let (h, w) = (self.h / 2, self.w / 2);
        ensure!(h >= 2 && w >= 2, "downsample2 would produce {h}x{w}");
        Ok(ImageGrid::from_fn(h, w, self.c, |y, x, ch| {
            0.25 * (self.get(2 * y, 2 * x, ch)
                + self.get(2 * y, 2 * x + 1, ch)
                + self.get(2 * y + 1, 2 * x, ch)
                + self.get(2 * y + 1, 2 * x + 1, ch))
        }))
    }

    /// Single channel view of channel `ch`.
    pub fn channel(&self, ch: usize) -> ImageGrid {
        ImageGrid::from_fn(self.h, self.w, 1, |y, x, _| self.get(y, x, ch))
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> ImageGrid {
        let c = self.c as f64;
        ImageGrid::from_fn(self.h, self.w, 1, |y, x, _| {
            (0..self.c).map(|ch| self.get(y, x, ch)).sum::<f64>() / c
        })
    }
}

/// H×W horizontal disparity in fractions of the image width.
///
/// A value `d` is a shift of `d * W` pixels. One-pixel-high maps are
/// allowed (coarse pyramid levels, unit tests).
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(h >= 1 && w >= 1, "disparity map must be non-empty");
        if data.len() != h * w {
            return Err(Error::shape("DisparityMap::new", h * w, data.len()));
        }
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "disparity contains non-finite values"
        );
        Ok(DisparityMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        DisparityMap::new(h, w, vec![value; h * w]).expect("valid constant disparity")
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        DisparityMap::new(h, w, data).expect("from_fn produced an invalid disparity map")
    }

    pub(crate) fn from_raw(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        DisparityMap { h, w, data }
    }

    /// Builds a map from pixel-unit disparities.
    pub fn from_pixels(h: usize, w: usize, pixels: &[f64]) -> Result<Self> {
        DisparityMap::new(h, w, pixels.iter().map(|p| p / w as f64).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    /// Disparities in pixels at this map's resolution.
    pub fn to_pixels(&self) -> Vec<f64> {
        self.data.iter().map(|d| d * self.w as f64).collect()
    }

    pub fn flip_horizontal(&self) -> DisparityMap {
        DisparityMap::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }

    pub fn flip_vertical(&self) -> DisparityMap {
        DisparityMap::from_fn(self.h, self.w, |y, x| self.get(self.h - 1 - y, x))
    }

    /// View as a single-channel image (requires at least 2×2).
    pub fn as_image(&self) -> Result<ImageGrid> {
        ImageGrid::new(self.h, self.w, 1, self.data.clone())
    }
}

/// Hard per-pixel annotation over the label set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape("LabelMask::new", h * w, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Contract(format!(
                "label value {bad} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        Ok(LabelMask { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, class: Class) -> Self {
        LabelMask {
            h,
            w,
            labels: vec![class as u8; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> Class) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(f(y, x) as u8);
            }
        }
        LabelMask { h, w, labels }
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn contains(&self, class: Class) -> bool {
        self.labels.contains(&(class as u8))
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&l| l == class as u8).count()
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.h {
            for x in 0..self.w {
                labels.push(self.get(y, self.w - 1 - x));
            }
        }
        LabelMask {
            h: self.h,
            w: self.w,
            labels,
        }
    }

    pub fn flip_vertical(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.h {
            for x in 0..self.w {
                labels.push(self.get(self.h - 1 - y, x));
            }
        }
        LabelMask {
            h: self.h,
            w: self.w,
            labels,
        }
    }
}

/// Per-pixel class probabilities, `NUM_CLASSES` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    h: usize,
    w: usize,
    probs: Vec<f64>,
}

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-5;

impl SegMap {
    /// Validates shape, range and per-pixel normalisation.
    pub fn new(h: usize, w: usize, probs: Vec<f64>) -> Result<Self> {
        let map = SegMap::unchecked(h, w, probs)?;
        map.check_normalized()?;
        Ok(map)
    }

    /// Shape check only; used by finite-difference probes that perturb
    /// single probabilities.
    pub fn unchecked(h: usize, w: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != h * w * NUM_CLASSES {
            return Err(Error::shape("SegMap::new", h * w * NUM_CLASSES, probs.len()));
        }
        Ok(SegMap { h, w, probs })
    }

    /// One-hot probabilities of a label mask.
    pub fn one_hot(mask: &LabelMask) -> SegMap {
        let mut probs = vec![0.0; mask.h * mask.w * NUM_CLASSES];
        for (i, &l) in mask.labels.iter().enumerate() {
            probs[i * NUM_CLASSES + l as usize] = 1.0;
        }
        SegMap {
            h: mask.h,
            w: mask.w,
            probs,
        }
    }

    pub fn uniform(h: usize, w: usize) -> SegMap {
        SegMap {
            h,
            w,
            probs: vec![1.0 / NUM_CLASSES as f64; h * w * NUM_CLASSES],
        }
    }

    pub fn check_normalized(&self) -> Result<()> {
        for (i, row) in self.probs.chunks(NUM_CLASSES).enumerate() {
            let sum: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|p| p.is_finite() && (-1e-12..=1.0 + 1e-12).contains(p)),
                "probabilities at pixel {i} outside [0,1]: {row:?}"
            );
            ensure!(
                (sum - 1.0).abs() <= PROB_SUM_TOL,
                "probabilities at pixel {i} sum to {sum}, not 1"
            );
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    pub fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    /// Probability row of pixel (y, x).
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * NUM_CLASSES;
        &self.probs[i..i + NUM_CLASSES]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let labels = self
            .probs
            .chunks(NUM_CLASSES)
            .map(|row| {
                let mut best = 0;
                for k in 1..NUM_CLASSES {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            h: self.h,
            w: self.w,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_shapes() {
        assert!(ImageGrid::new(1, 4, 1, vec![0.0; 4]).is_err());
        assert!(ImageGrid::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let img = ImageGrid::filled(8, 6, 3, 0.37);
        let half = img.downsample2().unwrap();
        assert_eq!(half.shape(), (4, 3, 3));
        assert!(half.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let seg = SegMap::new(1, 2, vec![0.1, 0.6, 0.1, 0.1, 0.1, 0.4, 0.4, 0.1, 0.05, 0.05]).unwrap();
        assert_eq!(seg.argmax().labels(), &[1, 0]);
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        assert!(LabelMask::new(1, 2, vec![0, 5]).is_err());
        assert!(LabelMask::new(1, 2, vec![0, 4]).is_ok());
    }

    #[test]
    fn segmap_normalisation_is_checked() {
        assert!(SegMap::new(1, 1, vec![0.2, 0.2, 0.2, 0.2, 0.3]).is_err());
        assert!(SegMap::new(1, 1, vec![0.2; 5]).is_ok());
    }
}
