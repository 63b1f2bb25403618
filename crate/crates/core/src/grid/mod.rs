//! Raster types shared by every stage: probability maps, images, label maps,
//! confidence maps, rectangles, and non-overlapping patch grids.

mod raster;
mod resize;
mod tiling;

pub use raster::Raster;
pub use resize::{
    bilinear_taps, resize_image, resize_labels, resize_probmap, resize_probmap_unnormalized, scaled_dims, Tap,
};
pub use tiling::{make_patch_grid, reflect_index, PatchGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from training and evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Maximum per-pixel deviation of a channel sum from one.
pub const PROB_SUM_TOLERANCE: f32 = 1e-5;

/// Per-pixel class probabilities, stored channel-major as `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Wraps a channel-major buffer. Only the shape is checked here; use
    /// [`ProbMap::validate`] for the probability invariants.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(format!(
                "probability map needs at least 2 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "probability map dims must be >= 1, got {height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "probability map buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Every pixel gets `1 / channels` in every channel.
    pub fn uniform(channels: usize, height: usize, width: usize) -> Result<Self> {
        let v = 1.0 / channels.max(1) as f32;
        Self::new(channels, height, width, vec![v; channels * height * width])
    }

    /// One-hot encoding of a label map. Ignore pixels become uniform.
    pub fn one_hot(labels: &LabelMap, channels: usize) -> Result<Self> {
        let (h, w) = (labels.height(), labels.width());
        let mut map = Self::new(channels, h, w, vec![0.0; channels * h * w])?;
        let plane = h * w;
        for (i, &l) in labels.data().iter().enumerate() {
            if l == IGNORE_LABEL {
                for c in 0..channels {
                    map.data[c * plane + i] = 1.0 / channels as f32;
                }
            } else if (l as usize) < channels {
                map.data[l as usize * plane + i] = 1.0;
            } else {
                return Err(Error::invalid(format!("label {l} out of range for {channels} classes")));
            }
        }
        Ok(map)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Probability vector of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    /// Largest absolute deviation of a per-pixel channel sum from one.
    pub fn max_sum_deviation(&self) -> f32 {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let s: f64 = (0..self.channels).map(|c| self.data[c * n + i] as f64).sum();
                (s - 1.0).abs() as f32
            })
            .fold(0.0, f32::max)
    }

    /// Checks that every value is in `[0, 1]` and every pixel sums to one
    /// within [`PROB_SUM_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::corrupt(format!("probability value {v} outside [0, 1]")));
        }
        let dev = self.max_sum_deviation();
        if dev > PROB_SUM_TOLERANCE {
            return Err(Error::corrupt(format!("channel sums deviate from 1 by up to {dev}")));
        }
        Ok(())
    }
}

/// 8-bit RGB image, pixel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel class indices; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "label map dims must be >= 1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "label buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Fails if any non-ignore label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
            Some(l) => Err(Error::invalid(format!("label {l} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

/// Per-pixel maximum class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "confidence buffer has {} values, expected {}",
                data.len(),
                height * width
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Mean over the part of `rect` that lies inside the map.
    pub fn mean_over(&self, rect: Rect) -> Option<f64> {
        let y1 = (rect.y + rect.h).min(self.height);
        let x1 = (rect.x + rect.w).min(self.width);
        if rect.y >= y1 || rect.x >= x1 {
            return None;
        }
        let mut sum = 0.0f64;
        for y in rect.y..y1 {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            sum += row[rect.x..x1].iter().map(|&v| v as f64).sum::<f64>();
        }
        Some(sum / ((y1 - rect.y) * (x1 - rect.x)) as f64)
    }
}

/// Axis-aligned pixel rectangle: top-left offset plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub const fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x0 < x1 && y0 < y1).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.intersect(other).is_some()
    }
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

/// Per-pixel max over channels.
pub fn confidence_map(map: &ProbMap) -> ConfidenceMap {
    let n = map.height * map.width;
    let mut out = map.plane(0).to_vec();
    for c in 1..map.channels {
        for (o, &v) in out.iter_mut().zip(&map.data[c * n..(c + 1) * n]) {
            if v > *o {
                *o = v;
            }
        }
    }
    ConfidenceMap {
        height: map.height,
        width: map.width,
        data: out,
    }
}

/// Per-pixel argmax; ties go to the lowest channel index.
pub fn argmax_labels(map: &ProbMap) -> LabelMap {
    let n = map.height * map.width;
    let mut best = map.plane(0).to_vec();
    let mut labels = vec![0u8; n];
    for c in 1..map.channels {
        for i in 0..n {
            let v = map.data[c * n + i];
            if v > best[i] {
                best[i] = v;
                labels[i] = c as u8;
            }
        }
    }
    LabelMap {
        height: map.height,
        width: map.width,
        data: labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, data: &[f32]) -> ProbMap {
        ProbMap::new(c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn confidence_is_channel_max() {
        let m = map(2, 1, 1, &[0.7, 0.3]);
        assert_eq!(confidence_map(&m).data(), &[0.7]);
        let u = ProbMap::uniform(4, 3, 5).unwrap();
        assert!(confidence_map(&u).data().iter().all(|&v| v == 0.25));
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let oh = ProbMap::one_hot(&labels, 3).unwrap();
        assert!(confidence_map(&oh).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn argmax_examples() {
        let labels = LabelMap::filled(2, 2, 2).unwrap();
        let oh = ProbMap::one_hot(&labels, 4).unwrap();
        assert!(argmax_labels(&oh).data().iter().all(|&l| l == 2));
        assert_eq!(argmax_labels(&map(2, 1, 1, &[0.5, 0.5])).data(), &[0]);
        assert_eq!(argmax_labels(&map(3, 1, 1, &[0.2, 0.5, 0.3])).data(), &[1]);
    }

    #[test]
    fn shape_errors() {
        assert!(ProbMap::new(1, 2, 2, vec![1.0; 4]).is_err());
        assert!(ProbMap::new(2, 0, 2, vec![]).is_err());
        assert!(ProbMap::new(2, 2, 2, vec![0.5; 7]).is_err());
        assert!(RgbImage::new(1, 1, vec![0; 2]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn validate_flags_bad_sums() {
        assert!(map(2, 1, 1, &[0.5, 0.5]).validate().is_ok());
        assert!(map(2, 1, 1, &[0.5, 0.6]).validate().is_err());
        assert!(map(2, 1, 1, &[1.5, -0.5]).validate().is_err());
    }

    #[test]
    fn check_classes_honors_ignore() {
        let l = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 1]).unwrap();
        assert!(l.check_classes(2).is_ok());
        assert!(l.check_classes(1).is_err());
    }

    #[test]
    fn rect_serializes_as_array() {
        let r = Rect::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&r).unwrap(), "[1,2,3,4]");
        let back: Rect = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, r);
    }
}
