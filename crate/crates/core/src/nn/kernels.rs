//! Low-level per-sample kernels: im2col convolution, pooling, upsampling.

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`. A transposed operand is stored row-major in its
/// transposed shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every addressed element lies
    // within the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided `c = beta * c + a * b` where `a` is `m x k`, `b` is `k x n` and
/// `c` is `m x n` with unit column stride. Strides are in elements.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    rsc: usize,
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every addressed element of the three
    // slices, and `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Up to this many output channels the weight gradient is computed with row
/// dot products, which beat a GEMM whose output is this narrow.
const NARROW_COUT: usize = 16;

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is inside
/// `0..w`.
fn valid_ox(g: &ConvGeom, wo: usize, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx - 1) / g.stride + 1 } else { 0 };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

/// Output rows processed per im2col tile, sized so a tile stays in cache.
fn tile_rows(g: &ConvGeom, wo: usize, ho: usize) -> usize {
    const TILE_FLOATS: usize = 1 << 16;
    const MIN_COLS: usize = 512;
    let by_cache = TILE_FLOATS / (g.patch_len() * wo).max(1);
    by_cache.max(MIN_COLS.div_ceil(wo.max(1))).clamp(1, ho.max(1))
}

/// Fills `cols` (`patch_len x (oy1-oy0)*wo`) with the patches of output rows
/// `oy0..oy1`.
fn im2col_rows(x: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [f32]) {
    let (_, wo) = g.out_hw();
    let pc = (oy1 - oy0) * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * pc..(row + 1) * pc];
                let (lo, hi) = valid_ox(g, wo, kx);
                for oy in oy0..oy1 {
                    let line = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: accumulates the tile into `dx`.
fn col2im_rows(cols: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [f32]) {
    let (_, wo) = g.out_hw();
    let pc = (oy1 - oy0) * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * pc..(row + 1) * pc];
                let (lo, hi) = valid_ox(g, wo, kx);
                if lo == hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[(oy - oy0) * wo + lo..(oy - oy0) * wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one sample. `w` is `cout x (cin*k*k)`.
pub fn conv_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut out = vec![0.0f32; g.cout * p];
    let kdim = g.patch_len();
    if g.is_pointwise() {
        gemm(g.cout, kdim, p, w, false, x, false, &mut out, 0.0);
    } else {
        let rows = tile_rows(g, wo, ho);
        let mut cols = vec![0.0f32; kdim * rows * wo];
        let mut oy0 = 0;
        while oy0 < ho {
            let oy1 = (oy0 + rows).min(ho);
            let pc = (oy1 - oy0) * wo;
            let tile = &mut cols[..kdim * pc];
            im2col_rows(x, g, oy0, oy1, tile);
            gemm_strided((g.cout, kdim, pc), w, (kdim, 1), tile, (pc, 1), &mut out[oy0 * wo..], p, 0.0);
            oy0 = oy1;
        }
    }
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Backward convolution of one sample. Returns `(dx, dw, db)`; `dx` is
/// skipped (empty) when `need_dx` is false.
pub fn conv_backward(x: &[f32], w: &[f32], dout: &[f32], g: &ConvGeom, need_dx: bool) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kdim = g.patch_len();
    let mut dw = vec![0.0f32; g.cout * kdim];
    let db: Vec<f32> = dout.chunks(p).map(|c| c.iter().sum()).collect();
    if g.is_pointwise() {
        gemm(g.cout, p, kdim, dout, false, x, true, &mut dw, 0.0);
        let mut dx = Vec::new();
        if need_dx {
            dx = vec![0.0f32; kdim * p];
            gemm(kdim, g.cout, p, w, true, dout, false, &mut dx, 0.0);
        }
        return (dx, dw, db);
    }
    let rows = tile_rows(g, wo, ho);
    let mut cols = vec![0.0f32; kdim * rows * wo];
    let mut dx = if need_dx { vec![0.0f32; g.cin * g.h * g.w] } else { Vec::new() };
    let mut oy0 = 0;
    while oy0 < ho {
        let oy1 = (oy0 + rows).min(ho);
        let pc = (oy1 - oy0) * wo;
        let tile = &mut cols[..kdim * pc];
        let dout_tile = &dout[oy0 * wo..];
        im2col_rows(x, g, oy0, oy1, tile);
        if g.cout <= NARROW_COUT {
            for co in 0..g.cout {
                let d = &dout_tile[co * p..co * p + pc];
                for (r, patch) in tile.chunks_exact(pc).enumerate() {
                    dw[co * kdim + r] += dot(d, patch);
                }
            }
        } else {
            gemm_strided((g.cout, pc, kdim), dout_tile, (p, 1), tile, (1, pc), &mut dw, kdim, 1.0);
        }
        if need_dx {
            gemm_strided((kdim, g.cout, pc), w, (1, kdim), dout_tile, (p, 1), tile, pc, 0.0);
            col2im_rows(tile, g, oy0, oy1, &mut dx);
        }
        oy0 = oy1;
    }
    (dx, dw, db)
}

/// Max pooling of one `c x h x w` sample. Returns the output and, for every
/// output element, the flat input index that won.
pub fn maxpool_forward(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (Vec<f32>, Vec<u32>) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + iy as usize) * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

/// Source taps for bilinear 2x upsampling (half-pixel centres, edge clamp).
fn upsample_taps(n_in: usize, o: usize) -> (usize, usize, f32) {
    let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f32)
}

/// Bilinear 2x upsampling of one `c x h x w` sample.
pub fn upsample2_forward(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * ho * wo];
    let xt: Vec<_> = (0..wo).map(|ox| upsample_taps(w, ox)).collect();
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = upsample_taps(h, oy);
            let row = &mut out[(ci * ho + oy) * wo..(ci * ho + oy + 1) * wo];
            for (ox, v) in row.iter_mut().enumerate() {
                let (x0, x1, lx) = xt[ox];
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                *v = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; c * h * w];
    let xt: Vec<_> = (0..wo).map(|ox| upsample_taps(w, ox)).collect();
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = upsample_taps(h, oy);
            let row = &dout[(ci * ho + oy) * wo..(ci * ho + oy + 1) * wo];
            for (ox, &g) in row.iter().enumerate() {
                let (x0, x1, lx) = xt[ox];
                plane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += g * (1.0 - ly) * lx;
                plane[y1 * w + x0] += g * ly * (1.0 - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}
