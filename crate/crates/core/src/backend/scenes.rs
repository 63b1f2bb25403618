use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::palette;
use crate::error::{Error, Result};
use crate::grid::{LabelMap, RgbImage};

/// Per-class area share and typical object size of synthetic scenes.
///
/// Class 0 is the background and fills whatever the other classes leave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneProfile {
    /// Expected fraction of pixels per class; sums to 1.
    pub area_fractions: Vec<f64>,
    /// Typical object extent as a fraction of the shorter image side. Entry 0 is unused.
    pub object_sizes: Vec<f64>,
}

impl SceneProfile {
    /// Area shares falling linearly with class index, object sizes shrinking geometrically.
    pub fn default_for(classes: usize) -> Self {
        let total: f64 = (0..classes).map(|c| (classes - c + 1) as f64).sum();
        Self {
            area_fractions: (0..classes).map(|c| (classes - c + 1) as f64 / total).collect(),
            object_sizes: (0..classes)
                .map(|c| if c == 0 { 1.0 } else { 0.5 * 0.4f64.powi(c as i32 - 1) })
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.area_fractions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.area_fractions.len();
        if c < 2 {
            return Err(Error::invalid(format!(
                "scene profile needs at least 2 classes, got {c}"
            )));
        }
        if c > 255 {
            return Err(Error::invalid(format!(
                "scene profile supports at most 255 classes, got {c}"
            )));
        }
        if self.object_sizes.len() != c {
            return Err(Error::config(
                "profile.object_sizes",
                format!("needs {c} entries, got {}", self.object_sizes.len()),
            ));
        }
        if self.area_fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::config("profile.area_fractions", "entries must be >= 0"));
        }
        let sum: f64 = self.area_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "profile.area_fractions",
                format!("must sum to 1, got {sum}"),
            ));
        }
        if self.object_sizes[1..].iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("profile.object_sizes", "entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub profile: SceneProfile,
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn classes(&self) -> usize {
        self.profile.classes()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Realized pixel share of every class over all scenes.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.classes()];
        let mut total = 0u64;
        for s in &self.scenes {
            for &l in s.labels.data() {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        counts.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
    }
}

// Placement stops once every foreground class is within this relative deficit.
const DEFICIT_SLACK: f64 = 0.02;
const MAX_OBJECTS: usize = 4096;

/// Renders `count` scenes of rectangles and ellipses over a class-0 background.
///
/// Each object's class is the foreground class furthest below its area
/// target, so realized shares track the profile per scene.
pub fn generate_scenes(profile: &SceneProfile, count: usize, dims: (usize, usize), seed: u64) -> Result<SceneSet> {
    profile.validate()?;
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("scene dims must be >= 1, got {h}x{w}")));
    }
    let pal = palette(profile.classes());
    let scenes = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let labels = render(profile, h, w, &mut rng);
            let image =
                RgbImage::new(h, w, labels.data().iter().flat_map(|&l| pal[l as usize]).collect()).expect("dims match");
            Scene {
                id: format!("scene_{i:04}"),
                image,
                labels,
            }
        })
        .collect();
    Ok(SceneSet {
        profile: profile.clone(),
        scenes,
    })
}

fn render(profile: &SceneProfile, h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let c = profile.classes();
    let n = (h * w) as f64;
    let mut labels = vec![0u8; h * w];
    let mut counts = vec![0usize; c];
    counts[0] = h * w;
    let side = h.min(w) as f64;
    for _ in 0..MAX_OBJECTS {
        let mut pick = None;
        let mut worst = DEFICIT_SLACK;
        for (k, &have) in counts.iter().enumerate().skip(1) {
            let target = profile.area_fractions[k] * n;
            if target < 1.0 {
                continue;
            }
            let deficit = (target - have as f64) / target;
            if deficit > worst {
                worst = deficit;
                pick = Some(k);
            }
        }
        let Some(k) = pick else { break };
        let missing = profile.area_fractions[k] * n - counts[k] as f64;
        let nominal = profile.object_sizes[k] * side;
        let mut oh = (nominal * rng.gen_range(0.6..1.4)).max(1.0);
        let mut ow = (nominal * rng.gen_range(0.6..1.4)).max(1.0);
        // Shrink the final objects of a class instead of overshooting its share.
        let cap = (missing * 1.2).max(4.0);
        if oh * ow > cap {
            let f = (cap / (oh * ow)).sqrt();
            oh = (oh * f).max(1.0);
            ow = (ow * f).max(1.0);
        }
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ellipse = rng.gen_bool(0.5);
        let (ry, rx) = (oh / 2.0, ow / 2.0);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(h);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    let old = &mut labels[y * w + x];
                    counts[*old as usize] -= 1;
                    counts[k] += 1;
                    *old = k as u8;
                }
            }
        }
    }
    LabelMap::new(h, w, labels).expect("dims match")
}
