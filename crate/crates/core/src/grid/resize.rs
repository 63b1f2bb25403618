//! Half-pixel-center resampling: a destination index `d` maps to the source
//! coordinate `(d + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.

use super::{LabelMap, ProbMap, RgbImage};
use crate::error::{Error, Result};

/// One axis of a bilinear stencil: two source indices and the weight of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Bilinear taps for every destination index along one axis.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

// Nearest source index under the center convention, in exact integer arithmetic:
// floor((d + 0.5) * in / out).
fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    (((2 * d + 1) * input) / (2 * output)).min(input - 1)
}

/// Dims of a raster scaled by `scale`, rounded to the nearest pixel (at least 1).
pub fn scaled_dims(height: usize, width: usize, scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (f(height), f(width))
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

fn bilinear_plane(src: &[f32], in_w: usize, ty: &[Tap], tx: &[Tap], out: &mut [f64]) {
    let out_w = tx.len();
    for (oy, t) in ty.iter().enumerate() {
        let r0 = &src[t.lo * in_w..(t.lo + 1) * in_w];
        let r1 = &src[t.hi * in_w..(t.hi + 1) * in_w];
        for (ox, s) in tx.iter().enumerate() {
            let top = r0[s.lo] as f64 * (1.0 - s.frac) + r0[s.hi] as f64 * s.frac;
            let bot = r1[s.lo] as f64 * (1.0 - s.frac) + r1[s.hi] as f64 * s.frac;
            out[oy * out_w + ox] = top * (1.0 - t.frac) + bot * t.frac;
        }
    }
}

/// Per-channel bilinear resampling without renormalization. Exposed so that
/// the interpolation itself can be checked independently of the final
/// normalization step.
pub fn resize_probmap_unnormalized(map: &ProbMap, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    check_target(out_h, out_w)?;
    let ty = bilinear_taps(map.height(), out_h);
    let tx = bilinear_taps(map.width(), out_w);
    let n = out_h * out_w;
    let mut out = vec![0.0f64; map.channels() * n];
    for c in 0..map.channels() {
        bilinear_plane(map.plane(c), map.width(), &ty, &tx, &mut out[c * n..(c + 1) * n]);
    }
    Ok(out)
}

/// Bilinear resize of every channel followed by per-pixel renormalization.
/// Resizing to the same dims returns an exact copy.
pub fn resize_probmap(map: &ProbMap, out_h: usize, out_w: usize) -> Result<ProbMap> {
    check_target(out_h, out_w)?;
    if map.dims() == (out_h, out_w) {
        return Ok(map.clone());
    }
    let raw = resize_probmap_unnormalized(map, out_h, out_w)?;
    let n = out_h * out_w;
    let c = map.channels();
    let mut data = vec![0.0f32; c * n];
    for i in 0..n {
        let sum: f64 = (0..c).map(|k| raw[k * n + i]).sum();
        for k in 0..c {
            data[k * n + i] = if sum > 0.0 {
                (raw[k * n + i] / sum) as f32
            } else {
                1.0 / c as f32
            };
        }
    }
    ProbMap::new(c, out_h, out_w, data)
}

/// Bilinear resize of an RGB image; samples are rounded half-up and clamped.
pub fn resize_image(img: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    check_target(out_h, out_w)?;
    if img.dims() == (out_h, out_w) {
        return Ok(img.clone());
    }
    let ty = bilinear_taps(img.height(), out_h);
    let tx = bilinear_taps(img.width(), out_w);
    let src = img.data();
    let in_w = img.width();
    let mut data = vec![0u8; out_h * out_w * 3];
    for (oy, t) in ty.iter().enumerate() {
        for (ox, s) in tx.iter().enumerate() {
            for ch in 0..3 {
                let at = |y: usize, x: usize| src[(y * in_w + x) * 3 + ch] as f64;
                let top = at(t.lo, s.lo) * (1.0 - s.frac) + at(t.lo, s.hi) * s.frac;
                let bot = at(t.hi, s.lo) * (1.0 - s.frac) + at(t.hi, s.hi) * s.frac;
                let v = top * (1.0 - t.frac) + bot * t.frac;
                data[(oy * out_w + ox) * 3 + ch] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(out_h, out_w, data)
}

/// Nearest-neighbor resize of a label map under the same center convention.
pub fn resize_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    check_target(out_h, out_w)?;
    if labels.dims() == (out_h, out_w) {
        return Ok(labels.clone());
    }
    let (in_h, in_w) = labels.dims();
    let xs: Vec<usize> = (0..out_w).map(|x| nearest_index(x, in_w, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = nearest_index(y, in_h, out_h);
        data.extend(xs.iter().map(|&sx| labels.get(sy, sx)));
    }
    LabelMap::new(out_h, out_w, data)
}
