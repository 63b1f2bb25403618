//! Segmentation-map providers: a scale-biased synthetic oracle and a
//! file-backed provider for maps precomputed by external models.

mod file;
mod oracle;
mod scenes;

pub use file::{FileBackend, ManifestRecord};
pub use oracle::{decode_class, oracle_error_rate, palette, Oracle, OracleConfig, CORRUPT_PEAK};
pub use scenes::{generate_scenes, Scene, SceneProfile, SceneSet};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ProbMap, Rect, RgbImage};

/// Identifies a patch request: the source image and the patch rect in the
/// coordinates of the (padded) scaled image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchId {
    pub image_id: String,
    pub rect: Rect,
}

impl PatchId {
    pub fn new(image_id: impl Into<String>, rect: Rect) -> Self {
        Self {
            image_id: image_id.into(),
            rect,
        }
    }
}

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.image_id, self.rect)
    }
}

/// Anything that turns an image patch into a probability map.
///
/// Implementations must be deterministic in their inputs and safe to call
/// from many threads at once.
pub trait Segmenter: Send + Sync {
    /// Returns a map with the patch's dims.
    fn segment(&self, patch: &RgbImage, scale: f64, id: &PatchId) -> Result<ProbMap>;

    /// Estimated cost of segmenting one pixel.
    fn flops_per_pixel(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    File,
    Oracle,
}

/// Backend block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Manifest path, required for `file`. Relative paths resolve against the config's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Oracle parameters, required for `oracle`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default = "default_flops_per_pixel")]
    pub flops_per_pixel: f64,
}

pub const DEFAULT_BACKEND_FLOPS_PER_PIXEL: f64 = 1.0e6;

fn default_flops_per_pixel() -> f64 {
    DEFAULT_BACKEND_FLOPS_PER_PIXEL
}

impl BackendSpec {
    pub fn oracle(cfg: OracleConfig) -> Self {
        Self {
            kind: BackendKind::Oracle,
            manifest: None,
            oracle: Some(cfg),
            flops_per_pixel: DEFAULT_BACKEND_FLOPS_PER_PIXEL,
        }
    }

    pub fn file(manifest: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::File,
            manifest: Some(manifest.into()),
            oracle: None,
            flops_per_pixel: DEFAULT_BACKEND_FLOPS_PER_PIXEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flops_per_pixel.is_finite() && self.flops_per_pixel > 0.0) {
            return Err(Error::config(
                "backend.flops_per_pixel",
                format!("must be a positive number, got {}", self.flops_per_pixel),
            ));
        }
        match self.kind {
            BackendKind::File if self.manifest.is_none() => Err(Error::config(
                "backend.manifest",
                "required when backend.kind is \"file\"",
            )),
            BackendKind::Oracle => match &self.oracle {
                None => Err(Error::config(
                    "backend.oracle",
                    "required when backend.kind is \"oracle\"",
                )),
                Some(o) => o.validate(),
            },
            BackendKind::File => Ok(()),
        }
    }
}

/// A configured backend.
#[derive(Debug, Clone)]
pub struct Backend {
    inner: Inner,
    flops_per_pixel: f64,
}

#[derive(Debug, Clone)]
enum Inner {
    Oracle(Oracle),
    File(FileBackend),
}

impl Backend {
    /// Builds the backend; relative manifest paths resolve against `base_dir`.
    pub fn from_spec(spec: &BackendSpec, base_dir: &Path) -> Result<Self> {
        spec.validate()?;
        let inner = match spec.kind {
            BackendKind::Oracle => Inner::Oracle(Oracle::new(spec.oracle.clone().expect("validated"))?),
            BackendKind::File => {
                let m = spec.manifest.as_ref().expect("validated");
                Inner::File(FileBackend::open(&base_dir.join(m))?)
            }
        };
        Ok(Self {
            inner,
            flops_per_pixel: spec.flops_per_pixel,
        })
    }

    pub fn from_oracle(cfg: OracleConfig) -> Result<Self> {
        Self::from_spec(&BackendSpec::oracle(cfg), Path::new("."))
    }

    pub fn oracle_config(&self) -> Option<&OracleConfig> {
        match &self.inner {
            Inner::Oracle(o) => Some(o.config()),
            Inner::File(_) => None,
        }
    }
}

impl Segmenter for Backend {
    fn segment(&self, patch: &RgbImage, scale: f64, id: &PatchId) -> Result<ProbMap> {
        match &self.inner {
            Inner::Oracle(o) => o.segment(patch, scale, id),
            Inner::File(f) => f.segment(patch, scale, id),
        }
    }

    fn flops_per_pixel(&self) -> f64 {
        self.flops_per_pixel
    }
}
