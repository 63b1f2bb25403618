//! Independent reference implementations: plain loops, 64-bit, no shared code
//! with the optimized paths beyond parameter storage.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sbss::ecm::EcnWeights;
use sbss::grid::{LabelMap, ProbMap};

/// `[channel][y][x]` feature planes.
pub type Planes = Vec<Vec<Vec<f64>>>;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Zero-padded "same" convolution; `w` is `[out][in][k][k]` row-major.
pub fn conv2d(x: &Planes, w: &[f32], b: &[f32], out_ch: usize, k: usize) -> Planes {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let r = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; wd]; h]; out_ch];
    for o in 0..out_ch {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o] as f64;
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let wv = w[((o * cin + i) * k + ky) * k + kx] as f64;
                            acc += wv * x[i][sy as usize][sx as usize];
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

/// Per-channel convolution; `w` is `[ch][k][k]`.
pub fn depthwise(x: &Planes, w: &[f32], b: &[f32], k: usize) -> Planes {
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            let single = vec![plane.clone()];
            conv2d(&single, &w[c * k * k..(c + 1) * k * k], &b[c..c + 1], 1, k).remove(0)
        })
        .collect()
}

fn map_planes(x: &Planes, f: impl Fn(f64) -> f64) -> Planes {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect())
        .collect()
}

/// Network output probabilities `[class][y][x]` computed layer by layer.
pub fn ecn_reference(w: &EcnWeights, lower: &ProbMap, upper: &ProbMap) -> Planes {
    let a = w.arch();
    let (h, wd) = lower.dims();
    let mut input: Planes = Vec::new();
    for m in [lower, upper] {
        for c in 0..m.channels() {
            input.push(
                (0..h)
                    .map(|y| (0..wd).map(|x| m.get(c, y, x) as f64).collect())
                    .collect(),
            );
        }
    }
    let mut act = map_planes(&conv2d(&input, &w.stem_w, &w.stem_b, a.width, a.stem_kernel), gelu);
    for bp in &w.blocks {
        let d = depthwise(&act, &bp.dw_w, &bp.dw_b, a.dw_kernel);
        let hidden = map_planes(&conv2d(&d, &bp.exp_w, &bp.exp_b, a.hidden(), 1), gelu);
        let proj = conv2d(&hidden, &bp.proj_w, &bp.proj_b, a.width, 1);
        for c in 0..a.width {
            for y in 0..h {
                for x in 0..wd {
                    act[c][y][x] += proj[c][y][x];
                }
            }
        }
    }
    let logits = conv2d(&act, &w.head_w, &w.head_b, a.classes, 1);
    let mut out = logits.clone();
    for y in 0..h {
        for x in 0..wd {
            let m = (0..a.classes).map(|c| logits[c][y][x]).fold(f64::MIN, f64::max);
            let z: f64 = (0..a.classes).map(|c| (logits[c][y][x] - m).exp()).sum();
            for c in 0..a.classes {
                out[c][y][x] = (logits[c][y][x] - m).exp() / z;
            }
        }
    }
    out
}

/// Random valid probability map.
pub fn random_probmap(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap {
    let mut data = vec![0f32; c * h * w];
    for p in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (ch, v) in raw.iter().enumerate() {
            data[ch * h * w + p] = (v / s) as f32;
        }
    }
    ProbMap::new(c, h, w, data).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect()).unwrap()
}

/// Fills every parameter, biases included, with uniform values in `[-scale, scale)`.
pub fn randomize(w: &mut EcnWeights, rng: &mut ChaCha8Rng, scale: f32) {
    for t in w.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Mean IoU by direct per-class pixel counting; classes with an empty union are skipped.
pub fn brute_miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == c && g == c {
                inter += 1;
            }
            if p == c || g == c {
                union += 1;
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}
