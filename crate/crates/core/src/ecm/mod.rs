//! Error correction module: the error-correction network plus
//! adaptive-confidence-threshold fusion.

mod act;
mod ecn;
pub mod kernels;

pub use act::{act_fuse, act_threshold, ad_map, ActFusion, AdMap};
pub use ecn::{
    backward, concat_input, cross_entropy, ecn_forward, forward_logits, forward_trace, sample_loss,
    sample_loss_and_grads, softmax, BlockParams, BlockTrace, EcnArch, EcnParams, EcnWeights, Trace, EXPANSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ProbMap;

/// Which parts of the module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Confidence-threshold replacement of the lower map by the raw upper map.
    ActOnly,
    /// The network output replaces the patch outright.
    EcnOnly,
    /// Network output, then confidence-threshold replacement.
    EcnAct,
}

impl FusionMode {
    pub fn uses_ecn(self) -> bool {
        !matches!(self, FusionMode::ActOnly)
    }

    pub fn uses_act(self) -> bool {
        !matches!(self, FusionMode::EcnOnly)
    }
}

/// Outcome of correcting one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub map: ProbMap,
    /// Fraction of pixels taken from the candidate. 1.0 in `ecn_only` mode.
    pub replaced_fraction: f64,
}

/// Fuses the resized lower-scale map with the upper-scale map according to `mode`.
pub fn correct(mode: FusionMode, weights: Option<&EcnWeights>, lower: &ProbMap, upper: &ProbMap) -> Result<Correction> {
    let ecn = |w: Option<&EcnWeights>| {
        w.ok_or_else(|| Error::invalid(format!("fusion mode {mode:?} requires ECN weights")))
            .and_then(|w| ecn_forward(w, lower, upper))
    };
    match mode {
        FusionMode::ActOnly => {
            let f = act_fuse(lower, upper)?;
            let replaced_fraction = f.replaced_fraction();
            Ok(Correction {
                map: f.map,
                replaced_fraction,
            })
        }
        FusionMode::EcnOnly => Ok(Correction {
            map: ecn(weights)?,
            replaced_fraction: 1.0,
        }),
        FusionMode::EcnAct => {
            let candidate = ecn(weights)?;
            let f = act_fuse(lower, &candidate)?;
            let replaced_fraction = f.replaced_fraction();
            Ok(Correction {
                map: f.map,
                replaced_fraction,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{confidence_map, LabelMap};

    fn lower() -> ProbMap {
        ProbMap::new(2, 2, 2, vec![0.9, 0.8, 0.6, 0.55, 0.1, 0.2, 0.4, 0.45]).unwrap()
    }

    #[test]
    fn act_only_with_identical_maps() {
        let l = lower();
        let c = correct(FusionMode::ActOnly, None, &l, &l).unwrap();
        assert_eq!(c.map, l);
    }

    #[test]
    fn ecn_only_is_forward_output() {
        let w = EcnWeights::kaiming(EcnArch::standard(2), 3).unwrap();
        let up = ProbMap::one_hot(&LabelMap::new(2, 2, vec![1, 1, 0, 1]).unwrap(), 2).unwrap();
        let c = correct(FusionMode::EcnOnly, Some(&w), &lower(), &up).unwrap();
        assert_eq!(c.map, ecn_forward(&w, &lower(), &up).unwrap());
    }

    #[test]
    fn ecn_act_with_zero_weights() {
        let w = EcnWeights::zeros(EcnArch::standard(2)).unwrap();
        let l = lower();
        let c = correct(FusionMode::EcnAct, Some(&w), &l, &l).unwrap();
        // candidate is uniform: AD = (1 - conf_lower) / 2 = {.05, .1, .2, .225}
        let conf = confidence_map(&l);
        let ad: Vec<f32> = conf.data().iter().map(|v| (1.0 - v) * 0.5).collect();
        assert!(ad[3] > ad[2]);
        assert_eq!(c.map.pixel(1, 1), vec![0.5, 0.5]);
        for (y, x) in [(0, 0), (0, 1), (1, 0)] {
            assert_eq!(c.map.pixel(y, x), l.pixel(y, x));
        }
    }

    #[test]
    fn ecn_modes_need_weights() {
        let l = lower();
        assert!(correct(FusionMode::EcnOnly, None, &l, &l).is_err());
        assert!(correct(FusionMode::EcnAct, None, &l, &l).is_err());
    }

    #[test]
    fn mode_serde_names() {
        assert_eq!(serde_json::to_string(&FusionMode::EcnAct).unwrap(), "\"ecn_act\"");
        let m: FusionMode = serde_json::from_str("\"act_only\"").unwrap();
        assert_eq!(m, FusionMode::ActOnly);
    }
}
