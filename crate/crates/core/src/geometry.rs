//! Differentiable image-space primitives: horizontal disparity warping,
//! windowed SSIM and forward-difference gradients.
//!
//! Every forward function has a matching `*_backward` that returns the
//! vector-Jacobian product for an upstream gradient of the output's shape.

use crate::error::{Error, Result};
use crate::grid::{DisparityMap, ImageGrid};

/// SSIM stabilisation constants for unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Sign of the horizontal shift applied when sampling.
///
/// The left view is reconstructed by sampling the right view at
/// `x + d·W` ([`Direction::Plus`]); the right view samples the left view at
/// `x − d·W` ([`Direction::Minus`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Plus,
    Minus,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Plus => 1.0,
            Direction::Minus => -1.0,
        }
    }
}

/// Bilinear lookup position along a row, clamped to the border.
#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    x1: usize,
    t: f64,
    /// false when the unclamped coordinate fell outside `[0, W-1]`.
    inside: bool,
}

#[inline]
fn tap(x: usize, d: f64, w: usize, sign: f64) -> Tap {
    let xs = x as f64 + sign * d * w as f64;
    let max = (w - 1) as f64;
    let inside = xs > 0.0 && xs < max;
    let xc = xs.clamp(0.0, max);
    let x0 = xc.floor() as usize;
    if x0 >= w - 1 {
        Tap {
            x0: w - 1,
            x1: w - 1,
            t: 0.0,
            inside,
        }
    } else {
        Tap {
            x0,
            x1: x0 + 1,
            t: xc - x0 as f64,
            inside,
        }
    }
}

/// Row-wise bilinear sampling of an interleaved (h, w, c) buffer.
fn sample_rows(src: &[f64], h: usize, w: usize, c: usize, disp: &[f64], sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let tp = tap(x, disp[y * w + x], w, sign);
            let (b0, b1) = ((y * w + tp.x0) * c, (y * w + tp.x1) * c);
            let o = (y * w + x) * c;
            for ch in 0..c {
                out[o + ch] = (1.0 - tp.t) * src[b0 + ch] + tp.t * src[b1 + ch];
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`sample_rows`]; returns (d src, d disp).
fn sample_rows_backward(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    disp: &[f64],
    sign: f64,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut g_src = vec![0.0; h * w * c];
    let mut g_disp = vec![0.0; h * w];
    let scale = sign * w as f64;
    for y in 0..h {
        for x in 0..w {
            let tp = tap(x, disp[y * w + x], w, sign);
            let (b0, b1) = ((y * w + tp.x0) * c, (y * w + tp.x1) * c);
            let o = (y * w + x) * c;
            let mut gd = 0.0;
            for ch in 0..c {
                let g = grad_out[o + ch];
                g_src[b0 + ch] += (1.0 - tp.t) * g;
                g_src[b1 + ch] += tp.t * g;
                if tp.inside {
                    gd += g * (src[b1 + ch] - src[b0 + ch]);
                }
            }
            g_disp[y * w + x] = gd * scale;
        }
    }
    (g_src, g_disp)
}

fn check_same_plane(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(
            op,
            format!("{}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        ));
    }
    Ok(())
}

/// Samples `source` at `(y, x + sign·disparity(y,x)·W)` with bilinear
/// interpolation, clamping horizontal coordinates to the image border.
pub fn warp_horizontal(
    source: &ImageGrid,
    disparity: &DisparityMap,
    direction: Direction,
) -> Result<ImageGrid> {
    let (h, w, c) = source.shape();
    check_same_plane("warp_horizontal", (h, w), disparity.shape())?;
    let out = sample_rows(source.data(), h, w, c, disparity.data(), direction.sign());
    Ok(ImageGrid::from_raw(h, w, c, out))
}

/// Gradient of [`warp_horizontal`] with respect to the source intensities
/// and the disparity values.
pub fn warp_horizontal_backward(
    source: &ImageGrid,
    disparity: &DisparityMap,
    direction: Direction,
    grad_out: &ImageGrid,
) -> Result<(ImageGrid, DisparityMap)> {
    let (h, w, c) = source.shape();
    check_same_plane("warp_horizontal_backward", (h, w), disparity.shape())?;
    if grad_out.shape() != source.shape() {
        return Err(Error::shape(
            "warp_horizontal_backward",
            format!("{:?}", source.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (gs, gd) = sample_rows_backward(
        source.data(),
        h,
        w,
        c,
        disparity.data(),
        direction.sign(),
        grad_out.data(),
    );
    Ok((ImageGrid::from_raw(h, w, c, gs), DisparityMap::from_raw(h, w, gd)))
}

/// Samples a disparity field through another disparity field
/// (`field(y, x + sign·by(y,x)·W)`).
pub fn warp_disparity(
    field: &DisparityMap,
    by: &DisparityMap,
    direction: Direction,
) -> Result<DisparityMap> {
    let (h, w) = field.shape();
    check_same_plane("warp_disparity", (h, w), by.shape())?;
    let out = sample_rows(field.data(), h, w, 1, by.data(), direction.sign());
    Ok(DisparityMap::from_raw(h, w, out))
}

/// Gradient of [`warp_disparity`]; returns (d field, d by).
pub fn warp_disparity_backward(
    field: &DisparityMap,
    by: &DisparityMap,
    direction: Direction,
    grad_out: &[f64],
) -> Result<(DisparityMap, DisparityMap)> {
    let (h, w) = field.shape();
    check_same_plane("warp_disparity_backward", (h, w), by.shape())?;
    let (gf, gb) =
        sample_rows_backward(field.data(), h, w, 1, by.data(), direction.sign(), grad_out);
    Ok((DisparityMap::from_raw(h, w, gf), DisparityMap::from_raw(h, w, gb)))
}

/// Per-window statistics of one channel pair.
struct WindowStats {
    n: f64,
    mu_a: f64,
    mu_b: f64,
    e_aa: f64,
    e_bb: f64,
    e_ab: f64,
}

#[inline]
fn window_range(i: usize, len: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(1)..=(i + 1).min(len - 1)
}

fn window_stats(a: &ImageGrid, b: &ImageGrid, y: usize, x: usize, ch: usize) -> WindowStats {
    let (h, w, _) = a.shape();
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in window_range(y, h) {
        for xx in window_range(x, w) {
            let va = a.get(yy, xx, ch);
            let vb = b.get(yy, xx, ch);
            n += 1.0;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    WindowStats {
        n,
        mu_a: sa / n,
        mu_b: sb / n,
        e_aa: saa / n,
        e_bb: sbb / n,
        e_ab: sab / n,
    }
}

/// SSIM value and its partial derivatives with respect to the window
/// statistics (mu_a, mu_b, E[a²], E[b²], E[ab]).
fn ssim_from_stats(s: &WindowStats) -> (f64, [f64; 5]) {
    let var_a = s.e_aa - s.mu_a * s.mu_a;
    let var_b = s.e_bb - s.mu_b * s.mu_b;
    let cov = s.e_ab - s.mu_a * s.mu_b;
    let a1 = 2.0 * s.mu_a * s.mu_b + SSIM_C1;
    let a2 = 2.0 * cov + SSIM_C2;
    let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + SSIM_C1;
    let b2 = var_a + var_b + SSIM_C2;
    let den = b1 * b2;
    let ssim = a1 * a2 / den;

    let d_mu_a = (2.0 * s.mu_b * a2 - 2.0 * s.mu_b * a1) / den
        - ssim * (2.0 * s.mu_a * b2 - 2.0 * s.mu_a * b1) / den;
    let d_mu_b = (2.0 * s.mu_a * a2 - 2.0 * s.mu_a * a1) / den
        - ssim * (2.0 * s.mu_b * b2 - 2.0 * s.mu_b * b1) / den;
    let d_e_aa = -ssim * b1 / den;
    let d_e_bb = d_e_aa;
    let d_e_ab = 2.0 * a1 / den;
    (ssim, [d_mu_a, d_mu_b, d_e_aa, d_e_bb, d_e_ab])
}

fn check_same_image(op: &'static str, a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Per-pixel SSIM over a 3×3 window (truncated at the image border),
/// averaged over channels. Output is single-channel.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    check_same_image("ssim_map", a, b)?;
    let (h, w, c) = a.shape();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += ssim_from_stats(&window_stats(a, b, y, x, ch)).0;
            }
            out[y * w + x] = acc / c as f64;
        }
    }
    Ok(ImageGrid::from_raw(h, w, 1, out))
}

/// Gradient of [`ssim_map`] with respect to both inputs, given the
/// upstream gradient of the single-channel SSIM map.
pub fn ssim_map_backward(
    a: &ImageGrid,
    b: &ImageGrid,
    grad_out: &ImageGrid,
) -> Result<(ImageGrid, ImageGrid)> {
    check_same_image("ssim_map_backward", a, b)?;
    let (h, w, c) = a.shape();
    if grad_out.shape() != (h, w, 1) {
        return Err(Error::shape(
            "ssim_map_backward",
            format!("({h}, {w}, 1)"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut ga = vec![0.0; h * w * c];
    let mut gb = vec![0.0; h * w * c];
    // Per-centre coefficients, already divided by the window size.
    let mut k = vec![[0.0f64; 5]; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s = window_stats(a, b, y, x, ch);
                let (_, d) = ssim_from_stats(&s);
                let g = grad_out.get(y, x, 0) / (c as f64 * s.n);
                k[y * w + x] = d.map(|v| v * g);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let va = a.get(y, x, ch);
                let vb = b.get(y, x, ch);
                let (mut acc_a, mut acc_b) = (0.0, 0.0);
                for yy in window_range(y, h) {
                    for xx in window_range(x, w) {
                        let [k_mu_a, k_mu_b, k_aa, k_bb, k_ab] = k[yy * w + xx];
                        acc_a += k_mu_a + 2.0 * va * k_aa + vb * k_ab;
                        acc_b += k_mu_b + 2.0 * vb * k_bb + va * k_ab;
                    }
                }
                ga[(y * w + x) * c + ch] = acc_a;
                gb[(y * w + x) * c + ch] = acc_b;
            }
        }
    }
    Ok((ImageGrid::from_raw(h, w, c, ga), ImageGrid::from_raw(h, w, c, gb)))
}

/// A 2-D (optionally multi-channel) grid of reals that finite differences
/// can be taken over.
pub trait Plane: Sized {
    fn dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[f64];
    fn with_values(&self, values: Vec<f64>) -> Self;
}

impl Plane for ImageGrid {
    fn dims(&self) -> (usize, usize, usize) {
        self.shape()
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        let (h, w, c) = self.shape();
        ImageGrid::from_raw(h, w, c, values)
    }
}

impl Plane for DisparityMap {
    fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), 1)
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        DisparityMap::from_raw(self.height(), self.width(), values)
    }
}

/// Forward difference along x; the last column is zero.
pub fn grad_x<G: Plane>(g: &G) -> G {
    let (h, w, c) = g.dims();
    let v = g.values();
    let mut out = vec![0.0; v.len()];
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                out[i] = v[i + c] - v[i];
            }
        }
    }
    g.with_values(out)
}

/// Forward difference along y; the last row is zero.
pub fn grad_y<G: Plane>(g: &G) -> G {
    let (h, w, c) = g.dims();
    let v = g.values();
    let row = w * c;
    let mut out = vec![0.0; v.len()];
    for i in 0..h.saturating_sub(1) * row {
        out[i] = v[i + row] - v[i];
    }
    g.with_values(out)
}

/// Adjoint of [`grad_x`]: scatters an upstream gradient back to the grid.
pub fn grad_x_backward(dims: (usize, usize, usize), upstream: &[f64]) -> Vec<f64> {
    let (h, w, c) = dims;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                out[i + c] += upstream[i];
                out[i] -= upstream[i];
            }
        }
    }
    out
}

/// Adjoint of [`grad_y`].
pub fn grad_y_backward(dims: (usize, usize, usize), upstream: &[f64]) -> Vec<f64> {
    let (h, w, c) = dims;
    let row = w * c;
    let mut out = vec![0.0; h * w * c];
    for i in 0..h.saturating_sub(1) * row {
        out[i + row] += upstream[i];
        out[i] -= upstream[i];
    }
    out
}
