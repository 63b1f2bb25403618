use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PatchId;
use crate::error::{Error, Result};
use crate::formats::{read_file, read_probmap};
use crate::grid::{ProbMap, Rect, RgbImage};

/// One manifest entry: the map stored for a patch of an image at a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_id: String,
    pub scale: f64,
    /// `[x, y, w, h]` in the scaled image.
    pub rect: [usize; 4],
    /// `.tns` payload, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

type Key = (String, i64, Rect);

// Scales are matched to nine decimal places so values that went through
// decimal JSON still meet their computed counterparts.
fn scale_key(scale: f64) -> i64 {
    (scale * 1e9).round() as i64
}

/// Serves precomputed maps listed in a JSON manifest.
#[derive(Debug, Clone)]
pub struct FileBackend {
    entries: HashMap<Key, PathBuf>,
}

impl FileBackend {
    pub fn open(manifest: &Path) -> Result<Self> {
        let bytes = read_file(manifest)?;
        let records: Vec<ManifestRecord> =
            serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(format!("manifest: {e}")).in_file(manifest))?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        Self::from_records(records, dir).map_err(|e| e.in_file(manifest))
    }

    pub fn from_records(records: Vec<ManifestRecord>, base_dir: &Path) -> Result<Self> {
        let mut entries = HashMap::with_capacity(records.len());
        for r in records {
            let [x, y, w, h] = r.rect;
            if w == 0 || h == 0 || !(r.scale.is_finite() && r.scale > 0.0) {
                return Err(Error::corrupt(format!(
                    "manifest record for {} has an empty rect or bad scale",
                    r.image_id
                )));
            }
            let key = (r.image_id, scale_key(r.scale), Rect::new(x, y, w, h));
            if entries.insert(key.clone(), base_dir.join(&r.path)).is_some() {
                return Err(Error::corrupt(format!(
                    "manifest lists {}@{} at scale {} twice",
                    key.0, key.2, r.scale
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn segment(&self, patch: &RgbImage, scale: f64, id: &PatchId) -> Result<ProbMap> {
        let key = (id.image_id.clone(), scale_key(scale), id.rect);
        let path = self
            .entries
            .get(&key)
            .ok_or_else(|| Error::NotFound(format!("no stored map for patch {id} at scale {scale}")))?;
        let map = read_probmap(path)?;
        if map.dims() != patch.dims() {
            return Err(Error::corrupt(format!(
                "stored map for patch {id} at scale {scale} is {}x{}, patch is {}x{}",
                map.height(),
                map.width(),
                patch.height(),
                patch.width()
            ))
            .in_file(path));
        }
        Ok(map)
    }
}
