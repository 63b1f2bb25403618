//! Supervised training of the error-correction network for one scale transition.

mod gradcheck;
mod samples;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, TensorCheck};
pub use samples::build_training_set;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::kernels::Scalar;
use crate::ecm::{sample_loss, sample_loss_and_grads, EcnArch, EcnParams, EcnWeights};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ProbMap, Raster, Rect, IGNORE_LABEL};

/// One training example: the resized lower-scale map, the upper-scale map
/// and the ground truth, all at the upper-scale patch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub lower: ProbMap,
    pub upper: ProbMap,
    pub target: LabelMap,
}

impl TrainSample {
    pub fn new(lower: ProbMap, upper: ProbMap, target: LabelMap) -> Result<Self> {
        if lower.channels() != upper.channels() {
            return Err(Error::invalid("sample maps differ in channel count"));
        }
        if lower.dims() != upper.dims() || lower.dims() != target.dims() {
            return Err(Error::invalid(format!(
                "sample geometries differ: lower {:?}, upper {:?}, target {:?}",
                lower.dims(),
                upper.dims(),
                target.dims()
            )));
        }
        target.check_classes(lower.channels())?;
        Ok(Self { lower, upper, target })
    }

    pub fn classes(&self) -> usize {
        self.lower.channels()
    }

    pub fn valid_pixels(&self) -> usize {
        self.target.data().iter().filter(|&&t| t != IGNORE_LABEL).count()
    }

    fn crop(&self, r: Rect) -> Result<Self> {
        Ok(Self {
            lower: self.lower.crop(r)?,
            upper: self.upper.crop(r)?,
            target: self.target.crop(r)?,
        })
    }

    fn hflip(&self) -> Self {
        fn flip<T: Copy>(data: &[T], w: usize) -> Vec<T> {
            data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
        }
        let (h, w) = self.target.dims();
        let c = self.classes();
        Self {
            lower: ProbMap::new(c, h, w, flip(self.lower.data(), w)).expect("same geometry"),
            upper: ProbMap::new(c, h, w, flip(self.upper.data(), w)).expect("same geometry"),
            target: LabelMap::new(h, w, flip(self.target.data(), w)).expect("same geometry"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Side of the square random crop; `None` trains on whole samples.
    pub crop: Option<usize>,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            seed: 0,
            crop: None,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        // Zero is accepted so that a run can be made a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.crop == Some(0) {
            return Err(Error::config("crop", "must be at least 1"));
        }
        Ok(())
    }

    /// Poly schedule `lr0 * (1 - t/T)^power`, zero from `t = T` on.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let t = step.min(self.iterations) as f64 / self.iterations as f64;
        self.learning_rate * (1.0 - t).powf(self.poly_power)
    }
}

/// Mean cross-entropy over all non-ignore pixels of the batch and its
/// gradient. Samples are processed in parallel and reduced in batch order.
pub fn loss_and_grads<T: Scalar>(params: &EcnParams<T>, batch: &[TrainSample]) -> Result<(T, EcnParams<T>)> {
    let valid: usize = batch.iter().map(TrainSample::valid_pixels).sum();
    if valid == 0 {
        return Err(Error::invalid("batch has no labelled pixels"));
    }
    let scale = T::lit(1.0 / valid as f64);
    let parts: Vec<(T, usize, EcnParams<T>)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(params, &s.lower, &s.upper, &s.target, scale))
        .collect::<Result<_>>()?;
    let mut total = EcnParams::zeros(params.arch())?;
    let mut loss = T::zero();
    for (l, _, g) in parts {
        loss = loss + l;
        for (acc, part) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.iter_mut().zip(part) {
                *a = *a + b;
            }
        }
    }
    Ok((loss * scale, total))
}

/// Momentum update on flat slices: `v = m*v + g + wd*w`, `w -= lr*v`.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    assert!(
        w.len() == g.len() && w.len() == v.len(),
        "optimizer buffers differ in length"
    );
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = m * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

/// SGD with momentum, weight decay on every parameter and poly learning rate.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: EcnWeights,
}

impl Sgd {
    pub fn new(arch: EcnArch) -> Result<Self> {
        Ok(Self {
            velocity: EcnWeights::zeros(arch)?,
        })
    }

    pub fn velocity(&self) -> &EcnWeights {
        &self.velocity
    }

    /// Applies step `step` (0-based) and returns the learning rate used.
    pub fn step(&mut self, weights: &mut EcnWeights, grads: &EcnWeights, step: usize, cfg: &TrainConfig) -> f64 {
        let lr = cfg.learning_rate_at(step);
        for ((w, g), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            sgd_update(w, g, v, lr, cfg.momentum, cfg.weight_decay);
        }
        lr
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLine {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iter {} lr {:.6e} loss {:.6}", self.iteration, self.lr, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: EcnWeights,
    /// Mean loss on the monitor subset before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<LogLine>,
}

/// Samples used to measure initial and final loss.
const MONITOR_SAMPLES: usize = 64;

fn monitor_loss(weights: &EcnWeights, samples: &[TrainSample]) -> Result<f64> {
    let subset: Vec<&TrainSample> = samples
        .iter()
        .filter(|s| s.valid_pixels() > 0)
        .take(MONITOR_SAMPLES)
        .collect();
    batch_loss(weights, &subset)
}

/// Mean per-pixel cross-entropy over the labelled pixels of `samples`.
pub fn batch_loss(weights: &EcnWeights, samples: &[&TrainSample]) -> Result<f64> {
    let parts = samples
        .par_iter()
        .map(|s| sample_loss(weights, &s.lower, &s.upper, &s.target))
        .collect::<Result<Vec<_>>>()?;
    let (loss, count) = parts
        .iter()
        .fold((0f64, 0usize), |(l, n), &(sl, sn)| (l + sl as f64, n + sn));
    if count == 0 {
        return Err(Error::invalid("batch has no labelled pixels"));
    }
    Ok(loss / count as f64)
}

/// Training with the standard architecture for the samples' class count.
pub fn train(cfg: &TrainConfig, samples: &[TrainSample]) -> Result<TrainOutcome> {
    let classes = samples
        .first()
        .ok_or_else(|| Error::invalid("no training samples"))?
        .classes();
    train_with(cfg, EcnArch::standard(classes), samples, |_| {})
}

/// Trains a fresh network of architecture `arch`, calling `log` after every step.
pub fn train_with(
    cfg: &TrainConfig,
    arch: EcnArch,
    samples: &[TrainSample],
    mut log: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.classes() != arch.classes) {
        return Err(Error::invalid(format!(
            "sample has {} classes, network expects {}",
            s.classes(),
            arch.classes
        )));
    }
    if samples.iter().all(|s| s.valid_pixels() == 0) {
        return Err(Error::invalid("training samples have no labelled pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = EcnWeights::kaiming(arch, rng.gen())?;
    let initial_loss = monitor_loss(&weights, samples)?;
    let mut sgd = Sgd::new(arch)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut lines = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let (h, w) = s.target.dims();
            let mut s = match cfg.crop {
                Some(c) if c < h || c < w => {
                    let (ch, cw) = (c.min(h), c.min(w));
                    let y = rng.gen_range(0..=h - ch);
                    let x = rng.gen_range(0..=w - cw);
                    s.crop(Rect::new(x, y, cw, ch))?
                }
                _ => s.clone(),
            };
            if cfg.hflip && rng.gen_bool(0.5) {
                s = s.hflip();
            }
            batch.push(s);
        }
        // An all-ignore batch contributes no step; the schedule still advances.
        let line = if batch.iter().any(|s| s.valid_pixels() > 0) {
            let (loss, grads) = loss_and_grads(&weights, &batch)?;
            let lr = sgd.step(&mut weights, &grads, it, cfg);
            LogLine {
                iteration: it,
                lr,
                loss: loss as f64,
            }
        } else {
            LogLine {
                iteration: it,
                lr: cfg.learning_rate_at(it),
                loss: f64::NAN,
            }
        };
        log(&line);
        lines.push(line);
    }
    if !weights.is_finite() {
        return Err(Error::invalid("training diverged to non-finite weights"));
    }
    let final_loss = monitor_loss(&weights, samples)?;
    Ok(TrainOutcome {
        weights,
        initial_loss,
        final_loss,
        log: lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> EcnArch {
        EcnArch {
            classes: 2,
            width: 4,
            blocks: 1,
            stem_kernel: 3,
            dw_kernel: 3,
        }
    }

    fn fixture(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|k| {
                let (h, w) = (6, 6);
                let labels: Vec<u8> = (0..h * w).map(|i| ((i % w + k) % 2) as u8).collect();
                let target = LabelMap::new(h, w, labels).unwrap();
                let upper = ProbMap::one_hot(&target, 2).unwrap();
                let lower = ProbMap::uniform(2, h, w).unwrap();
                TrainSample::new(lower, upper, target).unwrap()
            })
            .collect()
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let (mut w, mut v) = ([1.0f32], [0.0f32]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(v, [1.0]);
        assert!((w[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grads_zero_decay_keep_weights() {
        let mut w = EcnWeights::kaiming(tiny_arch(), 1).unwrap();
        let before = w.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut sgd = Sgd::new(tiny_arch()).unwrap();
        sgd.step(&mut w, &EcnWeights::zeros(tiny_arch()).unwrap(), 0, &cfg);
        assert_eq!(w.tensors(), before.tensors());
    }

    #[test]
    fn poly_endpoint_is_zero() {
        let cfg = TrainConfig {
            iterations: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.001);
        assert_eq!(cfg.learning_rate_at(10), 0.0);
        let mut w = EcnWeights::kaiming(tiny_arch(), 1).unwrap();
        let before = w.clone();
        let g = EcnWeights::kaiming(tiny_arch(), 2).unwrap();
        Sgd::new(tiny_arch()).unwrap().step(&mut w, &g, 10, &cfg);
        assert_eq!(w.tensors(), before.tensors());
    }

    #[test]
    fn zero_weights_loss_is_ln2() {
        let w = EcnWeights::zeros(tiny_arch()).unwrap();
        let (loss, _) = loss_and_grads(&w, &fixture(2)).unwrap();
        assert!((loss as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn batch_without_labels_rejected() {
        let mut s = fixture(1);
        s[0].target = LabelMap::filled(6, 6, IGNORE_LABEL).unwrap();
        let w = EcnWeights::zeros(tiny_arch()).unwrap();
        assert!(loss_and_grads(&w, &s).is_err());
    }

    #[test]
    fn batch_gradient_is_pixel_weighted_mean() {
        let w = EcnWeights::kaiming(tiny_arch(), 5).unwrap().cast::<f64>();
        let s = fixture(2);
        let (_, both) = loss_and_grads(&w, &s).unwrap();
        let (_, a) = loss_and_grads(&w, &s[..1]).unwrap();
        let (_, b) = loss_and_grads(&w, &s[1..]).unwrap();
        for ((t, x), y) in both.tensors().iter().zip(a.tensors()).zip(b.tensors()) {
            for i in 0..t.len() {
                assert!((t[i] - 0.5 * (x[i] + y[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_lowers_loss() {
        let cfg = TrainConfig {
            iterations: 30,
            batch_size: 2,
            learning_rate: 0.01,
            crop: Some(4),
            hflip: true,
            seed: 9,
            ..TrainConfig::default()
        };
        let s = fixture(4);
        let a = train_with(&cfg, tiny_arch(), &s, |_| {}).unwrap();
        let b = train_with(&cfg, tiny_arch(), &s, |_| {}).unwrap();
        assert_eq!(a.weights.tensors(), b.weights.tensors());
        assert_eq!(a.log.len(), 30);
        assert!(a.final_loss <= a.initial_loss, "{} > {}", a.final_loss, a.initial_loss);
    }

    #[test]
    fn full_batch_loss_does_not_increase_early() {
        let s = fixture(4);
        let cfg = TrainConfig {
            iterations: 11,
            batch_size: s.len(),
            learning_rate: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_with(&cfg, tiny_arch(), &s, |_| {}).unwrap();
        // Each logged loss is measured before that step's update, on the whole set.
        for pair in out.log.windows(2) {
            assert!(pair[1].loss <= pair[0].loss, "{} -> {}", pair[0].loss, pair[1].loss);
        }
        assert!(out.log[10].loss < out.log[0].loss);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train_with(&cfg, tiny_arch(), &fixture(2), |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = EcnWeights::kaiming(tiny_arch(), rng.gen()).unwrap();
        assert_eq!(out.weights.tensors(), init.tensors());
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(train(&TrainConfig::default(), &[]).is_err());
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(train(&cfg, &fixture(1)).is_err());
    }

    #[test]
    fn hflip_mirrors_rows() {
        let s = fixture(1)[0].hflip();
        assert_eq!(s.target.get(0, 0), fixture(1)[0].target.get(0, 5));
    }
}
