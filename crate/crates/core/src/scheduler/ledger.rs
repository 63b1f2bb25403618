use serde::{Deserialize, Serialize};

/// Work done at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleUsage {
    pub scale: f64,
    pub patches: u64,
    /// Pixels fed to the segmentation backend, padding included.
    pub backend_pixels: u64,
    /// Pixels passed through the correction network.
    pub ecn_pixels: u64,
    /// Part of `backend_pixels` that lies in reflection padding.
    pub padding_pixels: u64,
}

/// Accumulates processed area and estimated Flops over a run.
///
/// Sums are commutative, so patches may be recorded in any order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub original_pixels: u64,
    pub backend_flops_per_pixel: f64,
    pub ecn_flops_per_pixel: f64,
    pub scales: Vec<ScaleUsage>,
}

/// Summary written as the per-run JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub original_pixels: u64,
    pub total_ratio: f64,
    pub padding_ratio: f64,
    pub per_scale: Vec<ScaleReport>,
    pub backend_flops_per_pixel: f64,
    pub ecn_flops_per_pixel: f64,
    pub backend_flops: f64,
    pub ecn_flops: f64,
    pub total_flops: f64,
    /// Correction-network Flops relative to backend Flops.
    pub ecn_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    #[serde(flatten)]
    pub usage: ScaleUsage,
    pub ratio: f64,
}

impl BudgetLedger {
    pub fn new(original_pixels: u64, backend_flops_per_pixel: f64, ecn_flops_per_pixel: f64) -> Self {
        Self {
            original_pixels,
            backend_flops_per_pixel,
            ecn_flops_per_pixel,
            scales: Vec::new(),
        }
    }

    fn entry(&mut self, scale: f64) -> &mut ScaleUsage {
        let i = match self.scales.iter().position(|u| u.scale == scale) {
            Some(i) => i,
            None => {
                self.scales.push(ScaleUsage {
                    scale,
                    patches: 0,
                    backend_pixels: 0,
                    ecn_pixels: 0,
                    padding_pixels: 0,
                });
                self.scales.len() - 1
            }
        };
        &mut self.scales[i]
    }

    pub fn record(&mut self, scale: f64, backend_pixels: u64, ecn_pixels: u64) {
        let e = self.entry(scale);
        e.backend_pixels += backend_pixels;
        e.ecn_pixels += ecn_pixels;
    }

    /// Records one processed patch of `area` pixels, `padding` of which are padding.
    pub fn record_patch(&mut self, scale: f64, area: u64, padding: u64, through_ecn: bool) {
        let e = self.entry(scale);
        e.patches += 1;
        e.backend_pixels += area;
        e.padding_pixels += padding;
        if through_ecn {
            e.ecn_pixels += area;
        }
    }

    fn over_original(&self, px: u64) -> f64 {
        if self.original_pixels == 0 {
            0.0
        } else {
            px as f64 / self.original_pixels as f64
        }
    }

    pub fn backend_pixels(&self) -> u64 {
        self.scales.iter().map(|u| u.backend_pixels).sum()
    }

    pub fn ecn_pixels(&self) -> u64 {
        self.scales.iter().map(|u| u.ecn_pixels).sum()
    }

    /// Total backend pixels over original pixels.
    pub fn ratio(&self) -> f64 {
        self.over_original(self.backend_pixels())
    }

    /// Folds another image's ledger into this one.
    pub fn merge(&mut self, other: &BudgetLedger) {
        self.original_pixels += other.original_pixels;
        for u in &other.scales {
            let e = self.entry(u.scale);
            e.patches += u.patches;
            e.backend_pixels += u.backend_pixels;
            e.ecn_pixels += u.ecn_pixels;
            e.padding_pixels += u.padding_pixels;
        }
    }

    pub fn report(&self) -> LedgerReport {
        let backend_flops = self.backend_pixels() as f64 * self.backend_flops_per_pixel;
        let ecn_flops = self.ecn_pixels() as f64 * self.ecn_flops_per_pixel;
        LedgerReport {
            original_pixels: self.original_pixels,
            total_ratio: self.ratio(),
            padding_ratio: self.over_original(self.scales.iter().map(|u| u.padding_pixels).sum()),
            per_scale: self
                .scales
                .iter()
                .map(|u| ScaleReport {
                    usage: u.clone(),
                    ratio: self.over_original(u.backend_pixels),
                })
                .collect(),
            backend_flops_per_pixel: self.backend_flops_per_pixel,
            ecn_flops_per_pixel: self.ecn_flops_per_pixel,
            backend_flops,
            ecn_flops,
            total_flops: backend_flops + ecn_flops,
            ecn_share: if backend_flops > 0.0 {
                ecn_flops / backend_flops
            } else {
                0.0
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulation() {
        let mut l = BudgetLedger::new(100, 2.0, 1.0);
        assert_eq!(l.ratio(), 0.0);
        l.record(1.0, 100, 0);
        assert_eq!(l.ratio(), 1.0);
        l.record_patch(0.5, 25, 5, true);
        let r = l.report();
        assert_eq!(r.total_ratio, 1.25);
        assert_eq!(r.padding_ratio, 0.05);
        assert_eq!(r.backend_flops, 250.0);
        assert_eq!(r.ecn_flops, 25.0);
        assert_eq!(r.per_scale.len(), 2);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_scale"][1]["scale"], 0.5);
        assert_eq!(json["per_scale"][1]["ratio"], 0.25);
    }

    #[test]
    fn record_order_does_not_matter() {
        let mut a = BudgetLedger::new(64, 1.0, 1.0);
        let mut b = a.clone();
        a.record_patch(1.0, 16, 0, false);
        a.record_patch(1.0, 16, 4, false);
        b.record_patch(1.0, 16, 4, false);
        b.record_patch(1.0, 16, 0, false);
        assert_eq!(a, b);
    }
}
