use serde::{Deserialize, Serialize};

use super::Rect;
use crate::error::{Error, Result};

/// Non-overlapping row-major tiling of a raster padded up to whole patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub host_h: usize,
    pub host_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub patches: Vec<Rect>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.padded_h / self.patch_h
    }

    pub fn cols(&self) -> usize {
        self.padded_w / self.patch_w
    }

    /// Part of a patch that lies inside the host raster.
    pub fn host_part(&self, rect: &Rect) -> Option<Rect> {
        rect.intersect(&Rect::full(self.host_h, self.host_w))
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h != self.host_h || self.padded_w != self.host_w
    }
}

/// Tiles a `host_h x host_w` raster with `patch_h x patch_w` windows. The host
/// is conceptually reflection-padded up to the next multiple of the patch dims.
pub fn make_patch_grid(host_h: usize, host_w: usize, patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::invalid(format!(
            "patch dims must be >= 1, got {patch_h}x{patch_w}"
        )));
    }
    if host_h == 0 || host_w == 0 {
        return Err(Error::invalid(format!("host dims must be >= 1, got {host_h}x{host_w}")));
    }
    if patch_h > 4 * host_h || patch_w > 4 * host_w {
        return Err(Error::invalid(format!(
            "patch {patch_h}x{patch_w} exceeds 4x the host raster {host_h}x{host_w}"
        )));
    }
    let padded_h = host_h.div_ceil(patch_h) * patch_h;
    let padded_w = host_w.div_ceil(patch_w) * patch_w;
    let mut patches = Vec::with_capacity((padded_h / patch_h) * (padded_w / patch_w));
    for y in (0..padded_h).step_by(patch_h) {
        for x in (0..padded_w).step_by(patch_w) {
            patches.push(Rect::new(x, y, patch_w, patch_h));
        }
    }
    Ok(PatchGrid {
        host_h,
        host_w,
        patch_h,
        patch_w,
        padded_h,
        padded_w,
        patches,
    })
}

/// Mirror index into `[0, n)` without repeating the edge sample, periodic for
/// any offset so arbitrarily wide borders stay defined.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        assert_eq!(make_patch_grid(512, 1024, 512, 1024).unwrap().len(), 1);
        assert_eq!(make_patch_grid(1024, 2048, 512, 1024).unwrap().len(), 4);
        let g = make_patch_grid(500, 1000, 256, 512).unwrap();
        assert_eq!((g.padded_h, g.padded_w), (512, 1024));
        assert_eq!(g.len(), 4);
        assert!(g.is_padded());
    }

    #[test]
    fn patches_partition_padded_raster() {
        let g = make_patch_grid(37, 53, 8, 16).unwrap();
        let mut hits = vec![0u8; g.padded_h * g.padded_w];
        for r in &g.patches {
            for y in r.y..r.bottom() {
                for x in r.x..r.right() {
                    hits[y * g.padded_w + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        assert_eq!(g.patches.iter().map(Rect::area).sum::<usize>(), g.padded_h * g.padded_w);
    }

    #[test]
    fn row_major_order() {
        let g = make_patch_grid(4, 4, 2, 2).unwrap();
        assert_eq!(
            g.patches,
            vec![
                Rect::new(0, 0, 2, 2),
                Rect::new(2, 0, 2, 2),
                Rect::new(0, 2, 2, 2),
                Rect::new(2, 2, 2, 2)
            ]
        );
    }

    #[test]
    fn pathological_patch_rejected() {
        assert!(make_patch_grid(10, 10, 41, 8).is_err());
        assert!(make_patch_grid(10, 10, 40, 40).is_ok());
        assert!(make_patch_grid(10, 10, 0, 4).is_err());
    }

    #[test]
    fn reflect_is_periodic_mirror() {
        let got: Vec<usize> = (-3..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(17, 1), 0);
    }
}
