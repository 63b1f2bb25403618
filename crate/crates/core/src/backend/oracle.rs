use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatchId;
use crate::error::{Error, Result};
use crate::grid::{ProbMap, RgbImage};

/// Range of the peak probability a corrupted pixel puts on its wrong class.
pub const CORRUPT_PEAK: (f64, f64) = (0.55, 0.8);

/// Scale-biased synthetic segmenter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub classes: usize,
    /// Scale at which each class is segmented best.
    pub preferred_scales: Vec<f64>,
    pub e_min: f64,
    pub e_max: f64,
    pub gain: f64,
    /// Lower bound of the peak probability of a correctly labelled pixel; in (0.5, 1].
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            preferred_scales: vec![0.5, 0.5, 1.0, 1.5],
            e_min: 0.05,
            e_max: 0.5,
            gain: 0.15,
            sharpness: 0.7,
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// An oracle that never errs.
    pub fn perfect(classes: usize) -> Self {
        Self {
            classes,
            preferred_scales: vec![1.0; classes],
            e_min: 0.0,
            e_max: 1.0,
            gain: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, msg: String| Err(Error::config(format!("oracle.{name}"), msg));
        if !(2..=255).contains(&self.classes) {
            return f("classes", format!("must be in [2, 255], got {}", self.classes));
        }
        if self.preferred_scales.len() != self.classes {
            return f(
                "preferred_scales",
                format!(
                    "needs one entry per class ({}), got {}",
                    self.classes,
                    self.preferred_scales.len()
                ),
            );
        }
        if let Some(s) = self.preferred_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return f("preferred_scales", format!("entries must be positive, got {s}"));
        }
        if !(0.0..1.0).contains(&self.e_min) {
            return f("e_min", format!("must be in [0, 1), got {}", self.e_min));
        }
        if !(self.e_max > self.e_min && self.e_max <= 1.0) {
            return f("e_max", format!("must be in (e_min, 1], got {}", self.e_max));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return f("gain", format!("must be >= 0, got {}", self.gain));
        }
        if !(self.sharpness > 0.5 && self.sharpness <= 1.0) {
            return f("sharpness", format!("must be in (0.5, 1], got {}", self.sharpness));
        }
        Ok(())
    }
}

/// Per-pixel corruption probability `min(e_max, e_min + g (log2 s - log2 s*_c)^2)`.
pub fn oracle_error_rate(cfg: &OracleConfig, class: usize, scale: f64) -> f64 {
    let d = scale.log2() - cfg.preferred_scales[class].log2();
    cfg.e_max.min(cfg.e_min + cfg.gain * d * d)
}

const BASE_PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [70, 70, 70],
    [220, 20, 60],
    [0, 0, 142],
    [107, 142, 35],
    [250, 170, 30],
    [70, 130, 180],
    [220, 220, 0],
];

/// Scene rendering color of each class.
pub fn palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes)
        .map(|c| match BASE_PALETTE.get(c) {
            Some(p) => *p,
            None => {
                let c = c as u32;
                [(c * 37 % 256) as u8, (c * 91 % 256) as u8, (c * 173 % 256) as u8]
            }
        })
        .collect()
}

/// Class whose palette color is nearest to `rgb`; ties go to the lower class.
pub fn decode_class(palette: &[[u8; 3]], rgb: [u8; 3]) -> usize {
    let dist = |p: &[u8; 3]| -> i32 { (0..3).map(|i| (p[i] as i32 - rgb[i] as i32).pow(2)).sum() };
    let mut best = 0;
    for (c, p) in palette.iter().enumerate().skip(1) {
        if dist(p) < dist(&palette[best]) {
            best = c;
        }
    }
    best
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Reads the true class off the palette and corrupts it at the scale's error rate.
///
/// Noise is keyed by `(seed, image id, scale, absolute pixel)`, so tiling,
/// patch order and threading never change the output.
#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: OracleConfig,
    palette: Vec<[u8; 3]>,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let palette = palette(cfg.classes);
        Ok(Self { cfg, palette })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn base_rng(&self, image_id: &str, scale: f64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.cfg.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&fnv1a(image_id.as_bytes()).to_le_bytes());
        seed[16..24].copy_from_slice(&scale.to_bits().to_le_bytes());
        seed[24..32].copy_from_slice(b"oracle\0\0");
        ChaCha8Rng::from_seed(seed)
    }

    pub fn segment(&self, patch: &RgbImage, scale: f64, id: &PatchId) -> Result<ProbMap> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        let c = self.cfg.classes;
        let (h, w) = patch.dims();
        let plane = h * w;
        let base = self.base_rng(&id.image_id, scale);
        let rates: Vec<f64> = (0..c).map(|k| oracle_error_rate(&self.cfg, k, scale)).collect();
        let mut data = vec![0f32; c * plane];
        let mut rest = vec![0f64; c];
        for y in 0..h {
            for x in 0..w {
                let truth = decode_class(&self.palette, patch.pixel(y, x));
                let mut rng = base.clone();
                rng.set_stream((((id.rect.y + y) as u64) << 32) | (id.rect.x + x) as u64);
                rng.set_word_pos(0);
                let (class, peak) = if rng.gen::<f64>() < rates[truth] {
                    let k = rng.gen_range(0..c - 1);
                    let wrong = if k >= truth { k + 1 } else { k };
                    (wrong, rng.gen_range(CORRUPT_PEAK.0..CORRUPT_PEAK.1))
                } else {
                    (truth, rng.gen_range(self.cfg.sharpness..=1.0))
                };
                let mut total = 0.0;
                for (k, r) in rest.iter_mut().enumerate() {
                    *r = if k == class { 0.0 } else { rng.gen::<f64>() };
                    total += *r;
                }
                let p = y * w + x;
                for (k, r) in rest.iter().enumerate() {
                    let v = if k == class {
                        peak
                    } else if total > 0.0 {
                        (1.0 - peak) * r / total
                    } else {
                        (1.0 - peak) / (c - 1) as f64
                    };
                    data[k * plane + p] = v as f32;
                }
            }
        }
        ProbMap::new(c, h, w, data)
    }
}
