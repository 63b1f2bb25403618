//! Error-correction schemes: scale lists with per-scale patch fractions,
//! low-confidence patch selection, multi-scale average voting and the
//! processed-area / Flops ledger.

mod ledger;

pub use ledger::{BudgetLedger, LedgerReport, ScaleUsage};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resize_probmap, resize_probmap_unnormalized, ConfidenceMap, PatchGrid, ProbMap, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Stacking over the usual multi-scale set minus its largest scale, full coverage.
    EcsMs,
    /// Four scales with shrinking coverage, budgeted below a single-scale pass.
    EcsSs,
    /// Average voting over six scales.
    BaselineMs,
    /// One pass at the original resolution.
    BaselineSs,
    Custom,
}

/// Ordered scales, the fraction of patches processed at each, and the patch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub scheme: Scheme,
    pub scales: Vec<f64>,
    pub fractions: Vec<f64>,
    pub patch_h: usize,
    pub patch_w: usize,
}

pub const BASELINE_MS_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

impl ScaleSchedule {
    pub fn new(scheme: Scheme, scales: Vec<f64>, fractions: Vec<f64>, patch_h: usize, patch_w: usize) -> Result<Self> {
        let s = Self {
            scheme,
            scales,
            fractions,
            patch_h,
            patch_w,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn ecs_ms(patch_h: usize, patch_w: usize) -> Self {
        Self::new(
            Scheme::EcsMs,
            BASELINE_MS_SCALES[..5].to_vec(),
            vec![1.0; 5],
            patch_h,
            patch_w,
        )
        .expect("preset is valid")
    }

    pub fn ecs_ss(patch_h: usize, patch_w: usize) -> Self {
        Self::new(
            Scheme::EcsSs,
            vec![0.25, 0.5, 1.0, 1.5],
            vec![1.0, 1.0, 0.25, 1.0 / 12.0],
            patch_h,
            patch_w,
        )
        .expect("preset is valid")
    }

    pub fn baseline_ms(patch_h: usize, patch_w: usize) -> Self {
        Self::new(
            Scheme::BaselineMs,
            BASELINE_MS_SCALES.to_vec(),
            vec![1.0; 6],
            patch_h,
            patch_w,
        )
        .expect("preset is valid")
    }

    pub fn baseline_ss(patch_h: usize, patch_w: usize) -> Self {
        Self::new(Scheme::BaselineSs, vec![1.0], vec![1.0], patch_h, patch_w).expect("preset is valid")
    }

    pub fn preset(scheme: Scheme, patch_h: usize, patch_w: usize) -> Option<Self> {
        match scheme {
            Scheme::EcsMs => Some(Self::ecs_ms(patch_h, patch_w)),
            Scheme::EcsSs => Some(Self::ecs_ss(patch_h, patch_w)),
            Scheme::BaselineMs => Some(Self::baseline_ms(patch_h, patch_w)),
            Scheme::BaselineSs => Some(Self::baseline_ss(patch_h, patch_w)),
            Scheme::Custom => None,
        }
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Number of scale transitions, each with its own correction network.
    pub fn transitions(&self) -> usize {
        self.scales.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("scales", "at least one scale is required"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config("scales", format!("scales must be positive, got {s}")));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "scales",
                format!("scales must be strictly increasing, got {:?}", self.scales),
            ));
        }
        if self.fractions.len() != self.scales.len() {
            return Err(Error::config(
                "fractions",
                format!(
                    "needs one fraction per scale ({}), got {}",
                    self.scales.len(),
                    self.fractions.len()
                ),
            ));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::config(
                "fractions",
                format!("fractions must lie in [0, 1], got {f}"),
            ));
        }
        if self.fractions[0] != 1.0 {
            return Err(Error::config(
                "fractions",
                format!("the first scale needs full coverage (1.0), got {}", self.fractions[0]),
            ));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::config(
                "patch",
                format!("patch dims must be >= 1, got {}x{}", self.patch_h, self.patch_w),
            ));
        }
        Ok(())
    }
}

/// Processed area relative to the original image: `sum_i f_i * s_i^2`.
pub fn schedule_ratio(schedule: &ScaleSchedule) -> f64 {
    schedule
        .scales
        .iter()
        .zip(&schedule.fractions)
        .map(|(s, f)| f * s * s)
        .sum()
}

/// Number of patches processed out of `n` at fraction `f`: all for `f = 1`,
/// none for `f = 0`, otherwise `max(1, round_half_up(f n))` capped at `n`.
pub fn selection_count(f: f64, n: usize) -> usize {
    if f >= 1.0 {
        n
    } else if f <= 0.0 {
        0
    } else {
        ((f * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1)).min(n)
    }
}

/// Mean confidence of each patch over its unpadded pixels.
pub fn patch_scores(conf: &ConfidenceMap, grid: &PatchGrid) -> Result<Vec<f64>> {
    if conf.dims() != (grid.host_h, grid.host_w) {
        return Err(Error::invalid(format!(
            "confidence map is {}x{} but the grid tiles {}x{}",
            conf.height(),
            conf.width(),
            grid.host_h,
            grid.host_w
        )));
    }
    grid.patches
        .iter()
        .map(|r| {
            grid.host_part(r)
                .and_then(|h| conf.mean_over(h))
                .ok_or_else(|| Error::invalid(format!("patch {r} has no host pixels")))
        })
        .collect()
}

/// Indices of the selected patches in ascending score order (ties by index).
pub fn select_patch_indices(
    schedule: &ScaleSchedule,
    scale_index: usize,
    conf: &ConfidenceMap,
    grid: &PatchGrid,
) -> Result<Vec<usize>> {
    let f = *schedule.fractions.get(scale_index).ok_or_else(|| {
        Error::invalid(format!(
            "scale index {scale_index} out of range for {} scales",
            schedule.len()
        ))
    })?;
    let n = grid.len();
    if f > 0.0 && n == 0 {
        return Err(Error::invalid("cannot select patches from an empty grid"));
    }
    if f >= 1.0 {
        return Ok((0..n).collect());
    }
    let scores = patch_scores(conf, grid)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(selection_count(f, n));
    Ok(order)
}

/// The lowest-confidence patches at `scale_index`, see [`select_patch_indices`].
pub fn select_patches(
    schedule: &ScaleSchedule,
    scale_index: usize,
    conf: &ConfidenceMap,
    grid: &PatchGrid,
) -> Result<Vec<Rect>> {
    Ok(select_patch_indices(schedule, scale_index, conf, grid)?
        .into_iter()
        .map(|i| grid.patches[i])
        .collect())
}

/// Resizes every map to `out_h x out_w`, averages them and renormalizes.
pub fn ms_vote(maps: &[ProbMap], out_h: usize, out_w: usize) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("average voting needs at least one map"))?;
    let c = first.channels();
    if let Some(m) = maps.iter().find(|m| m.channels() != c) {
        return Err(Error::invalid(format!(
            "cannot vote over maps with {} and {} channels",
            c,
            m.channels()
        )));
    }
    if maps.len() == 1 {
        return resize_probmap(first, out_h, out_w);
    }
    let mut acc = vec![0f64; c * out_h * out_w];
    for m in maps {
        let r = resize_probmap_unnormalized(m, out_h, out_w)?;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let plane = out_h * out_w;
    let mut data = vec![0f32; acc.len()];
    for p in 0..plane {
        let sum: f64 = (0..c).map(|k| acc[k * plane + p]).sum();
        for k in 0..c {
            data[k * plane + p] = if sum > 0.0 {
                (acc[k * plane + p] / sum) as f32
            } else {
                1.0 / c as f32
            };
        }
    }
    ProbMap::new(c, out_h, out_w, data)
}
