//! Confusion matrices, per-class IoU / mIoU and the per-class scale-preference profiler.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{SceneSet, Segmenter};
use crate::error::{Error, Result};
use crate::grid::{argmax_labels, resize_probmap, LabelMap, IGNORE_LABEL};
use crate::pipeline::segment_at_scale;

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if !(1..=255).contains(&classes) {
            return Err(Error::invalid(format!(
                "class count must be in [1, 255], got {classes}"
            )));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        let mut m = Self::new(classes)?;
        if counts.len() != classes * classes {
            return Err(Error::invalid(format!(
                "{classes} classes need {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        m.counts = counts;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-ignore ground-truth pixel.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::invalid(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let c = self.classes;
        if let Some(p) = pred.data().iter().find(|&&p| p as usize >= c) {
            return Err(Error::invalid(if *p == IGNORE_LABEL {
                "prediction contains the ignore label".to_string()
            } else {
                format!("prediction label {p} out of range for {c} classes")
            }));
        }
        if let Some(g) = gt.data().iter().find(|&&g| g != IGNORE_LABEL && g as usize >= c) {
            return Err(Error::invalid(format!(
                "ground-truth label {g} out of range for {c} classes"
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU (`None` where the class never occurs in truth or prediction)
/// and their mean over the defined classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

impl IouReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["class", "iou"]).map_err(io)?;
        for (c, v) in self.per_class.iter().enumerate() {
            w.write_record([c.to_string(), fmt_opt(*v)]).map_err(io)?;
        }
        w.write_record(["mean".to_string(), fmt_opt(self.mean)]).map_err(io)?;
        finish_csv(w)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// `IoU_c = TP / (TP + FP + FN)`; classes with a zero denominator are left out of the mean.
pub fn miou(cm: &ConfusionMatrix) -> IouReport {
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    IouReport { per_class, mean }
}

/// IoU points below which the top two scales of a class count as tied.
pub const NO_PREFERENCE_MARGIN: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPreference {
    pub class: usize,
    /// IoU at each profiled scale, in the table's scale order.
    pub iou: Vec<Option<f64>>,
    pub best_scale: Option<f64>,
    /// The best and runner-up scales differ by less than [`NO_PREFERENCE_MARGIN`].
    pub no_preference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePreferenceTable {
    pub scales: Vec<f64>,
    pub classes: Vec<ClassPreference>,
    /// mIoU of each scale's single-scale run.
    pub mean_iou: Vec<Option<f64>>,
}

impl ScalePreferenceTable {
    fn build(scales: Vec<f64>, reports: &[IouReport]) -> Self {
        let c = reports[0].per_class.len();
        let classes = (0..c)
            .map(|k| {
                let iou: Vec<Option<f64>> = reports.iter().map(|r| r.per_class[k]).collect();
                let mut ranked: Vec<(usize, f64)> =
                    iou.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
                // Stable sort keeps the smaller scale first among exact ties.
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
                let best_scale = ranked.first().map(|&(i, _)| scales[i]);
                let no_preference = match ranked[..] {
                    [(_, a), (_, b), ..] => a - b < NO_PREFERENCE_MARGIN,
                    _ => false,
                };
                ClassPreference {
                    class: k,
                    iou,
                    best_scale,
                    no_preference,
                }
            })
            .collect();
        Self {
            mean_iou: reports.iter().map(|r| r.mean).collect(),
            scales,
            classes,
        }
    }

    pub fn best_scales(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(|c| c.best_scale).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        let mut head = vec!["class".to_string()];
        head.extend(self.scales.iter().map(|s| format!("iou@{s}")));
        head.extend(["best_scale".to_string(), "no_preference".to_string()]);
        w.write_record(&head).map_err(io)?;
        for c in &self.classes {
            let mut row = vec![c.class.to_string()];
            row.extend(c.iou.iter().map(|v| fmt_opt(*v)));
            row.push(c.best_scale.map_or_else(String::new, |s| s.to_string()));
            row.push(c.no_preference.to_string());
            w.write_record(&row).map_err(io)?;
        }
        finish_csv(w)
    }
}

/// Corpus confusion matrix of single-scale tiled inference at `scale`,
/// scored at the original resolution.
pub fn evaluate_scale(
    backend: &dyn Segmenter,
    scenes: &SceneSet,
    scale: f64,
    patch: (usize, usize),
) -> Result<ConfusionMatrix> {
    let c = scenes.classes();
    let per_scene = scenes
        .scenes
        .par_iter()
        .map(|s| {
            let m = segment_at_scale(backend, &s.id, &s.image, scale, patch, None)?;
            let (h, w) = s.labels.dims();
            let pred = argmax_labels(&resize_probmap(&m, h, w)?);
            let mut cm = ConfusionMatrix::new(c)?;
            cm.accumulate(&pred, &s.labels)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(c)?;
    for m in &per_scene {
        cm.merge(m)?;
    }
    Ok(cm)
}

/// Per-class IoU at every scale and the scale each class is segmented best at.
pub fn profile_scales(
    backend: &dyn Segmenter,
    scenes: &SceneSet,
    scales: &[f64],
    patch: (usize, usize),
) -> Result<ScalePreferenceTable> {
    if scales.is_empty() {
        return Err(Error::invalid("profiling needs at least one scale"));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("profiling needs at least one scene"));
    }
    let reports = scales
        .iter()
        .map(|&s| evaluate_scale(backend, scenes, s, patch).map(|cm| miou(&cm)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePreferenceTable::build(scales.to_vec(), &reports))
}
