use rayon::prelude::*;

use super::TrainSample;
use crate::backend::{PatchId, SceneSet, Segmenter};
use crate::error::{Error, Result};
use crate::grid::{resize_labels, resize_probmap, Raster, Rect};
use crate::pipeline::{segment_at_scale, ScaledInput};
use crate::scheduler::ScaleSchedule;

/// Training samples for transition `transition -> transition + 1`: every
/// patch of every scene at the upper scale, paired with the aligned region
/// of the resized lower-scale map and the resized ground truth.
///
/// Edge patches are cut to their unpadded part, matching inference.
pub fn build_training_set(
    backend: &dyn Segmenter,
    scenes: &SceneSet,
    schedule: &ScaleSchedule,
    transition: usize,
) -> Result<Vec<TrainSample>> {
    schedule.validate()?;
    if transition >= schedule.transitions() {
        return Err(Error::invalid(format!(
            "transition {transition} out of range; schedule has {}",
            schedule.transitions()
        )));
    }
    let (lo, hi) = (schedule.scales[transition], schedule.scales[transition + 1]);
    let patch = (schedule.patch_h, schedule.patch_w);
    let per_scene = scenes
        .scenes
        .iter()
        .map(|scene| {
            let lower_full = segment_at_scale(backend, &scene.id, &scene.image, lo, patch, None)?;
            let input = ScaledInput::new(&scene.image, hi, patch.0, patch.1)?;
            let (h, w) = input.host_dims();
            let lower_full = resize_probmap(&lower_full, h, w)?;
            let target_full = resize_labels(&scene.labels, h, w)?;
            let grid = &input.grid;
            grid.patches
                .par_iter()
                .map(|&rect| {
                    let host = grid.host_part(&rect).expect("every patch overlaps the host");
                    let id = PatchId::new(scene.id.as_str(), rect);
                    let upper = backend
                        .segment(&input.padded.crop(rect)?, hi, &id)
                        .map_err(|e| e.context(format!("segmenting patch {id} at scale {hi}")))?
                        .crop(Rect::new(0, 0, host.w, host.h))?;
                    TrainSample::new(lower_full.crop(host)?, upper, target_full.crop(host)?)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}
