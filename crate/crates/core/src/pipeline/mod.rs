//! The multi-scale stacking loop and the MS / SS baseline runners.
//!
//! Patch work inside one scale runs on the current rayon pool. Results are
//! assembled in patch-index order, so outputs do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{PatchId, Segmenter};
use crate::ecm::{correct, EcnWeights, FusionMode};
use crate::error::{Error, Result};
use crate::grid::{
    argmax_labels, confidence_map, make_patch_grid, resize_image, resize_probmap, scaled_dims, LabelMap, PatchGrid,
    ProbMap, Raster, Rect, RgbImage,
};
use crate::scheduler::{ms_vote, select_patch_indices, BudgetLedger, ScaleSchedule};

/// Resolved inputs of a stacking run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schedule: ScaleSchedule,
    pub mode: FusionMode,
    /// One network per transition; may be empty in `act_only` mode.
    pub weights: Vec<EcnWeights>,
}

impl RunConfig {
    pub fn new(schedule: ScaleSchedule, mode: FusionMode, weights: Vec<EcnWeights>) -> Result<Self> {
        let cfg = Self {
            schedule,
            mode,
            weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.mode.uses_ecn() && self.weights.len() != self.schedule.transitions() {
            return Err(Error::config(
                "weights",
                format!(
                    "fusion mode {:?} needs one weight file per transition ({}), got {}",
                    self.mode,
                    self.schedule.transitions(),
                    self.weights.len()
                ),
            ));
        }
        if let Some(w) = self.weights.first() {
            if let Some(o) = self.weights.iter().find(|o| o.classes() != w.classes()) {
                return Err(Error::config(
                    "weights",
                    format!(
                        "weight files disagree on class count ({} vs {})",
                        w.classes(),
                        o.classes()
                    ),
                ));
            }
        }
        Ok(())
    }

    fn ecn_flops_per_pixel(&self) -> f64 {
        match (self.mode.uses_ecn(), self.weights.first()) {
            (true, Some(w)) => w.arch().flops_per_pixel(),
            _ => 0.0,
        }
    }
}

/// Per-patch record of one correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDiagnostics {
    pub index: usize,
    /// Patch rect in the padded grid of the upper scale.
    pub rect: Rect,
    pub mean_confidence: f64,
    pub replaced_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDiagnostics {
    pub from_scale: f64,
    pub to_scale: f64,
    pub mode: FusionMode,
    pub ecn_applied: bool,
    pub act_applied: bool,
    pub grid_patches: usize,
    /// Selected patches in selection order.
    pub patches: Vec<PatchDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub transitions: Vec<TransitionDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Final probabilities at the original dims.
    pub probs: ProbMap,
    pub labels: LabelMap,
    pub ledger: BudgetLedger,
    pub diagnostics: Diagnostics,
}

fn patch_area_split(grid: &PatchGrid, rect: &Rect) -> (u64, u64) {
    let host = grid.host_part(rect).map_or(0, |h| h.area());
    (rect.area() as u64, (rect.area() - host) as u64)
}

fn segment_patch(
    backend: &dyn Segmenter,
    padded: &RgbImage,
    image_id: &str,
    rect: Rect,
    scale: f64,
) -> Result<ProbMap> {
    let id = PatchId::new(image_id, rect);
    let patch = padded.crop(rect)?;
    let map = backend
        .segment(&patch, scale, &id)
        .map_err(|e| e.context(format!("segmenting patch {id} at scale {scale}")))?;
    if map.dims() != patch.dims() {
        return Err(Error::corrupt(format!(
            "backend returned a {}x{} map for the {}x{} patch {id}",
            map.height(),
            map.width(),
            patch.height(),
            patch.width()
        )));
    }
    Ok(map)
}

/// Image resized to `scale` together with its padded patch grid.
pub struct ScaledInput {
    pub grid: PatchGrid,
    pub padded: RgbImage,
}

impl ScaledInput {
    pub fn new(image: &RgbImage, scale: f64, patch_h: usize, patch_w: usize) -> Result<Self> {
        let (h, w) = scaled_dims(image.height(), image.width(), scale);
        let grid = make_patch_grid(h, w, patch_h, patch_w).map_err(|e| e.context(format!("tiling scale {scale}")))?;
        let padded = resize_image(image, h, w)?.pad_reflect(grid.padded_h, grid.padded_w)?;
        Ok(Self { grid, padded })
    }

    pub fn host_dims(&self) -> (usize, usize) {
        (self.grid.host_h, self.grid.host_w)
    }
}

/// Tiled segmentation of the whole image at `scale`, cropped back to the scaled dims.
pub fn segment_at_scale(
    backend: &dyn Segmenter,
    image_id: &str,
    image: &RgbImage,
    scale: f64,
    patch: (usize, usize),
    ledger: Option<&mut BudgetLedger>,
) -> Result<ProbMap> {
    let input = ScaledInput::new(image, scale, patch.0, patch.1)?;
    let grid = &input.grid;
    let maps = grid
        .patches
        .par_iter()
        .map(|&r| segment_patch(backend, &input.padded, image_id, r, scale))
        .collect::<Result<Vec<_>>>()?;
    let c = maps[0].channels();
    let mut full = ProbMap::uniform(c, grid.padded_h, grid.padded_w)?;
    for (r, m) in grid.patches.iter().zip(&maps) {
        full.paste(m, *r)?;
    }
    if let Some(l) = ledger {
        for r in &grid.patches {
            let (area, pad) = patch_area_split(grid, r);
            l.record_patch(scale, area, pad, false);
        }
    }
    full.crop(Rect::full(grid.host_h, grid.host_w))
}

/// Runs the stacking loop on one image.
pub fn run_sbss(cfg: &RunConfig, backend: &dyn Segmenter, image_id: &str, image: &RgbImage) -> Result<RunResult> {
    cfg.validate()?;
    let s = &cfg.schedule;
    let patch = (s.patch_h, s.patch_w);
    let mut ledger = BudgetLedger::new(
        (image.height() * image.width()) as u64,
        backend.flops_per_pixel(),
        cfg.ecn_flops_per_pixel(),
    );
    let mut diagnostics = Diagnostics::default();
    let mut y = segment_at_scale(backend, image_id, image, s.scales[0], patch, Some(&mut ledger))?;

    for i in 0..s.transitions() {
        let to = s.scales[i + 1];
        let input = ScaledInput::new(image, to, patch.0, patch.1)?;
        let grid = &input.grid;
        let (h, w) = input.host_dims();
        let mut next = resize_probmap(&y, h, w)?;
        let conf = confidence_map(&next);
        let chosen = select_patch_indices(s, i + 1, &conf, grid)?;
        let weights = cfg.weights.get(i).filter(|_| cfg.mode.uses_ecn());
        let lower_src = &next;
        let results = chosen
            .par_iter()
            .map(|&k| {
                let rect = grid.patches[k];
                let host = grid.host_part(&rect).expect("every patch overlaps the host");
                let upper = segment_patch(backend, &input.padded, image_id, rect, to)?;
                let local = Rect::new(0, 0, host.w, host.h);
                let upper = upper.crop(local)?;
                let lower = lower_src.crop(host)?;
                let c = correct(cfg.mode, weights, &lower, &upper)
                    .map_err(|e| e.context(format!("correcting patch {image_id}@{rect} at scale {to}")))?;
                Ok((k, host, c))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut patches = Vec::with_capacity(results.len());
        for (k, host, c) in results {
            next.paste(&c.map, host)?;
            let rect = grid.patches[k];
            let (area, pad) = patch_area_split(grid, &rect);
            ledger.record_patch(to, area, pad, cfg.mode.uses_ecn());
            patches.push(PatchDiagnostics {
                index: k,
                rect,
                mean_confidence: conf.mean_over(host).unwrap_or(0.0),
                replaced_fraction: c.replaced_fraction,
            });
        }
        log::debug!(
            "{image_id}: scale {} -> {to}: {} of {} patches corrected",
            s.scales[i],
            patches.len(),
            grid.len()
        );
        diagnostics.transitions.push(TransitionDiagnostics {
            from_scale: s.scales[i],
            to_scale: to,
            mode: cfg.mode,
            ecn_applied: cfg.mode.uses_ecn(),
            act_applied: cfg.mode.uses_act(),
            grid_patches: grid.len(),
            patches,
        });
        y = next;
    }
    let probs = resize_probmap(&y, image.height(), image.width())?;
    let labels = argmax_labels(&probs);
    Ok(RunResult {
        probs,
        labels,
        ledger,
        diagnostics,
    })
}

/// Tiled segmentation at every scale, average voting at the original dims.
pub fn run_ms(
    backend: &dyn Segmenter,
    image_id: &str,
    image: &RgbImage,
    scales: &[f64],
    patch: (usize, usize),
) -> Result<RunResult> {
    if scales.is_empty() {
        return Err(Error::invalid("multi-scale run needs at least one scale"));
    }
    let (h, w) = image.dims();
    let mut ledger = BudgetLedger::new((h * w) as u64, backend.flops_per_pixel(), 0.0);
    let mut maps = Vec::with_capacity(scales.len());
    for &s in scales {
        maps.push(segment_at_scale(backend, image_id, image, s, patch, Some(&mut ledger))?);
    }
    let probs = ms_vote(&maps, h, w)?;
    let labels = argmax_labels(&probs);
    Ok(RunResult {
        probs,
        labels,
        ledger,
        diagnostics: Diagnostics::default(),
    })
}

/// Tiled segmentation at the original resolution.
pub fn run_ss(backend: &dyn Segmenter, image_id: &str, image: &RgbImage, patch: (usize, usize)) -> Result<RunResult> {
    run_ms(backend, image_id, image, &[1.0], patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{generate_scenes, Backend, OracleConfig, SceneProfile};
    use crate::scheduler::{schedule_ratio, Scheme};

    struct Fixed;

    // Same map at every scale: the true class from the red channel, fixed confidence.
    impl Segmenter for Fixed {
        fn segment(&self, patch: &RgbImage, _scale: f64, _id: &PatchId) -> Result<ProbMap> {
            let (h, w) = patch.dims();
            let mut data = vec![0.0; 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let c = usize::from(patch.pixel(y, x)[0] > 127);
                    data[c * h * w + y * w + x] = 0.8;
                    data[(1 - c) * h * w + y * w + x] = 0.2;
                }
            }
            ProbMap::new(2, h, w, data)
        }

        fn flops_per_pixel(&self) -> f64 {
            1.0
        }
    }

    fn halves(h: usize, w: usize) -> RgbImage {
        let mut img = RgbImage::filled(h, w, [0, 0, 0]).unwrap();
        for y in 0..h {
            for x in w / 2..w {
                img.set_pixel(y, x, [255, 255, 255]);
            }
        }
        img
    }

    #[test]
    fn single_scale_schedule_equals_tiled_ss() {
        let b = Backend::from_oracle(OracleConfig::default()).unwrap();
        let scenes = generate_scenes(&SceneProfile::default_for(4), 1, (40, 36), 2).unwrap();
        let sc = &scenes.scenes[0];
        let sched = ScaleSchedule::new(Scheme::Custom, vec![1.0], vec![1.0], 16, 16).unwrap();
        for mode in [FusionMode::ActOnly, FusionMode::EcnOnly, FusionMode::EcnAct] {
            let cfg = RunConfig::new(sched.clone(), mode, vec![]).unwrap();
            let r = run_sbss(&cfg, &b, &sc.id, &sc.image).unwrap();
            let ss = run_ss(&b, &sc.id, &sc.image, (16, 16)).unwrap();
            assert_eq!(r.probs, ss.probs);
            assert_eq!(r.labels, ss.labels);
            assert!(r.diagnostics.transitions.is_empty());
        }
    }

    #[test]
    fn act_with_identical_maps_keeps_first_decision() {
        let img = halves(24, 24);
        let sched = ScaleSchedule::ecs_ms(8, 8);
        let cfg = RunConfig::new(sched, FusionMode::ActOnly, vec![]).unwrap();
        let r = run_sbss(&cfg, &Fixed, "h", &img).unwrap();
        let first = segment_at_scale(&Fixed, "h", &img, 0.5, (8, 8), None).unwrap();
        let want = argmax_labels(&resize_probmap(&first, 24, 24).unwrap());
        assert_eq!(r.labels, want);
    }

    #[test]
    fn ecs_ss_ledger_ratio_exact_on_divisible_image() {
        let b = Backend::from_oracle(OracleConfig::default()).unwrap();
        let img = RgbImage::filled(64, 64, [70, 70, 70]).unwrap();
        let cfg = RunConfig::new(ScaleSchedule::ecs_ss(16, 16), FusionMode::ActOnly, vec![]).unwrap();
        let r = run_sbss(&cfg, &b, "x", &img).unwrap();
        assert_eq!(r.ledger.ratio(), 0.75);
        assert_eq!(r.ledger.ratio(), schedule_ratio(&cfg.schedule));
        assert_eq!(r.ledger.report().padding_ratio, 0.0);
    }

    #[test]
    fn ecn_modes_require_weights() {
        let e = RunConfig::new(ScaleSchedule::ecs_ss(8, 8), FusionMode::EcnAct, vec![]).unwrap_err();
        assert!(e.to_string().contains("`weights`"), "{e}");
    }

    #[test]
    fn ms_with_one_scale_is_ss() {
        let b = Backend::from_oracle(OracleConfig::default()).unwrap();
        let img = halves(20, 30);
        let a = run_ms(&b, "m", &img, &[1.0], (8, 8)).unwrap();
        let s = run_ss(&b, "m", &img, (8, 8)).unwrap();
        assert_eq!(a, s);
        assert_eq!(s.ledger.report().total_ratio, 32.0 * 24.0 / 600.0);
        assert!(run_ms(&b, "m", &img, &[], (8, 8)).is_err());
    }
}
