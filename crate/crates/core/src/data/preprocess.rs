use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Side length of network-ready frames.
pub const TARGET_SIZE: usize = 384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// 1280x720 endoscope frame.
    Endoscope1280x720,
    /// Already-prepared 384x384 stereo frame.
    Stereo384,
}

/// Bilinear sample with half-pixel centres and border clamping.
pub(crate) fn sample_bilinear(img: &ImageGrid, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = img.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, c) * (1.0 - lx) + img.get(y0, x1, c) * lx;
    let bot = img.get(y1, x0, c) * (1.0 - lx) + img.get(y1, x1, c) * lx;
    top * (1.0 - ly) + bot * ly
}

/// Bilinear resize of the window `[top, top+src_h) x [left, left+src_w)`.
pub fn resize_bilinear_window(
    img: &ImageGrid,
    (top, left, src_h, src_w): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> ImageGrid {
    let sy = src_h as f64 / out_h as f64;
    let sx = src_w as f64 / out_w as f64;
    let c = img.channels();
    ImageGrid::from_fn(out_h, out_w, c, |y, x, ch| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64) + top as f64;
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64) + left as f64;
        sample_bilinear(img, fy, fx, ch)
    })
}

/// Brings a raw frame to the network resolution: endoscope frames are
/// centre-cropped to 720x720 and resampled to 384x384; stereo frames pass
/// through.
pub fn preprocess_raw(image: &ImageGrid, kind: SourceKind) -> Result<ImageGrid> {
    let (h, w, _) = image.shape();
    let mut out = match kind {
        SourceKind::Endoscope1280x720 => {
            if (h, w) != (720, 1280) {
                return Err(Error::shape("preprocess_raw", "720x1280 endoscope frame", format!("{h}x{w}")));
            }
            resize_bilinear_window(image, (0, (1280 - 720) / 2, 720, 720), TARGET_SIZE, TARGET_SIZE)
        }
        SourceKind::Stereo384 => {
            if (h, w) != (TARGET_SIZE, TARGET_SIZE) {
                return Err(Error::shape("preprocess_raw", "384x384 stereo frame", format!("{h}x{w}")));
            }
            image.clone()
        }
    };
    out.clamp01();
    Ok(out)
}
