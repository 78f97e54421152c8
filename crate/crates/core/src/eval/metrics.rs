//! Per-image metrics: class Dice and disparity accuracy.

use crate::error::{Error, Result};
use crate::grid::{Class, DisparityMap, LabelMask};

/// Dice overlap of the binary masks of `class`.
///
/// Two empty masks score 1.0 and exactly one empty mask scores 0.0.
pub fn dice(prediction: &LabelMask, annotation: &LabelMask, class: Class) -> Result<f64> {
    if prediction.shape() != annotation.shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?}", annotation.shape()),
            format!("{:?}", prediction.shape()),
        ));
    }
    let c = class.index() as u8;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in prediction.labels().iter().zip(annotation.labels()) {
        let (in_p, in_g) = (a == c, b == c);
        p += in_p as usize;
        g += in_g as usize;
        both += (in_p && in_g) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

/// Dice of every foreground class, in [`Class::FOREGROUND`] order.
pub fn foreground_dice(prediction: &LabelMask, annotation: &LabelMask) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, class) in out.iter_mut().zip(Class::FOREGROUND) {
        *o = dice(prediction, annotation, class)?;
    }
    Ok(out)
}

fn valid_pairs<'a>(
    op: &'static str,
    pred: &'a DisparityMap,
    gt: &'a DisparityMap,
    valid: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    if valid.len() != gt.data().len() {
        return Err(Error::shape(op, gt.data().len(), valid.len()));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Eval(format!("{op}: the valid mask is empty")));
    }
    let w = gt.width() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(move |((&p, &g), _)| (p * w, g * w)))
}

/// Mean absolute disparity error in pixels and mean relative error
/// `|pred - gt| / gt`, both over the valid pixels.
///
/// Ground truth must be nonzero wherever it is valid.
pub fn depth_accuracy(pred: &DisparityMap, gt: &DisparityMap, valid: &[bool]) -> Result<(f64, f64)> {
    let (mut abs, mut rel, mut n) = (0.0, 0.0, 0usize);
    for (p, g) in valid_pairs("depth_accuracy", pred, gt, valid)? {
        if g == 0.0 {
            return Err(Error::Eval("depth_accuracy: zero ground-truth disparity on a valid pixel".into()));
        }
        abs += (p - g).abs();
        rel += (p - g).abs() / g.abs();
        n += 1;
    }
    Ok((abs / n as f64, rel / n as f64))
}

/// Range (max − min) in pixels of the valid ground-truth disparities.
pub fn disparity_range_px(gt: &DisparityMap, valid: &[bool]) -> Result<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, g) in valid_pairs("disparity_range_px", gt, gt, valid)? {
        lo = lo.min(g);
        hi = hi.max(g);
    }
    Ok(hi - lo)
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for a single
/// value). Empty input gives `(NaN, 0)`.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
