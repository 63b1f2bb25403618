use crate::error::{Error, Result};
use crate::grid::{confidence_map, ConfidenceMap, ProbMap};

/// Per-pixel `(1 - lower confidence) * upper confidence`: high where the
/// lower-scale map is unsure and the candidate is sure.
#[derive(Debug, Clone, PartialEq)]
pub struct AdMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl AdMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::invalid(format!(
                "AD buffer has {} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

pub fn ad_map(conf_lower: &ConfidenceMap, conf_upper: &ConfidenceMap) -> Result<AdMap> {
    if conf_lower.dims() != conf_upper.dims() {
        return Err(Error::invalid(format!(
            "confidence maps differ in size: {:?} vs {:?}",
            conf_lower.dims(),
            conf_upper.dims()
        )));
    }
    let data = conf_lower
        .data()
        .iter()
        .zip(conf_upper.data())
        .map(|(&l, &u)| (1.0 - l) * u)
        .collect();
    AdMap::new(conf_lower.height(), conf_lower.width(), data)
}

/// Upper median: element `floor(N / 2)` of the ascending order.
pub fn act_threshold(ad: &AdMap) -> f32 {
    let mut v = ad.data.clone();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f32::total_cmp);
    *m
}

/// Result of an adaptive-confidence-threshold fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ActFusion {
    pub map: ProbMap,
    /// Row-major per-pixel flag: `true` where the candidate replaced the base.
    pub mask: Vec<bool>,
    pub threshold: f32,
}

impl ActFusion {
    pub fn replaced(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn replaced_fraction(&self) -> f64 {
        self.replaced() as f64 / self.mask.len() as f64
    }
}

/// Replaces base pixels whose AD value strictly exceeds the median AD with the
/// candidate's full probability vectors.
pub fn act_fuse(base: &ProbMap, candidate: &ProbMap) -> Result<ActFusion> {
    if base.dims() != candidate.dims() || base.channels() != candidate.channels() {
        return Err(Error::invalid(format!(
            "ACT inputs differ: {}x{}x{} vs {}x{}x{}",
            base.channels(),
            base.height(),
            base.width(),
            candidate.channels(),
            candidate.height(),
            candidate.width()
        )));
    }
    let ad = ad_map(&confidence_map(base), &confidence_map(candidate))?;
    let threshold = act_threshold(&ad);
    let mask: Vec<bool> = ad.data.iter().map(|&v| v > threshold).collect();
    let mut map = base.clone();
    let n = base.height() * base.width();
    let (src, dst) = (candidate.data(), map.data_mut());
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..base.channels() {
            dst[c * n + i] = src[c * n + i];
        }
    }
    Ok(ActFusion { map, mask, threshold })
}
