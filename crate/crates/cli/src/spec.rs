//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbss::backend::{BackendSpec, SceneProfile};
use sbss::ecm::FusionMode;
use sbss::scheduler::{ScaleSchedule, Scheme};
use sbss::trainer::TrainConfig;
use sbss::Error;

/// Scheme names accepted in configs. `ms` and `ss` are the average-voting baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    EcsMs,
    EcsSs,
    Ms,
    Ss,
    Custom,
}

impl SchemeName {
    fn scheme(self) -> Scheme {
        match self {
            SchemeName::EcsMs => Scheme::EcsMs,
            SchemeName::EcsSs => Scheme::EcsSs,
            SchemeName::Ms => Scheme::BaselineMs,
            SchemeName::Ss => Scheme::BaselineSs,
            SchemeName::Custom => Scheme::Custom,
        }
    }

    /// The config spelling, e.g. `ecs_ss`.
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::EcsMs => "ecs_ms",
            SchemeName::EcsSs => "ecs_ss",
            SchemeName::Ms => "ms",
            SchemeName::Ss => "ss",
            SchemeName::Custom => "custom",
        }
    }

    /// Baselines run tiled inference at every scale and average; the others run the correction loop.
    pub fn is_baseline(self) -> bool {
        matches!(self, SchemeName::Ms | SchemeName::Ss)
    }
}

/// Synthetic corpus block used by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Defaults to the oracle's class count, or 4 without an oracle block.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub profile: Option<SceneProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub scheme: SchemeName,
    /// Required for `custom`; overrides the preset list otherwise.
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    #[serde(default)]
    pub fractions: Option<Vec<f64>>,
    /// Patch `[height, width]`.
    pub patch: [usize; 2],
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    pub backend: BackendSpec,
    /// One `.ecw` file per scale transition.
    #[serde(default)]
    pub weights: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Scene corpus directory (as written by `synth`) used by train-ecn, infer and profile.
    #[serde(default)]
    pub scenes: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Scales compared by `profile`.
    #[serde(default)]
    pub profile_scales: Option<Vec<f64>>,
}

fn default_fusion() -> FusionMode {
    FusionMode::EcnAct
}

fn field(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: RunSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let name = if path == "." { "config".to_string() } else { path };
            field(&name, e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a config; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut spec = Self::from_json(&text).map_err(|e| Error::File {
            path: path.into(),
            source: Box::new(e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.weights.iter_mut().for_each(join);
        self.out.iter_mut().for_each(join);
        self.scenes.iter_mut().for_each(join);
        self.backend.manifest.iter_mut().for_each(join);
    }

    pub fn schedule(&self) -> Result<ScaleSchedule, Error> {
        let [ph, pw] = self.patch;
        if ph == 0 || pw == 0 {
            return Err(field("patch", "patch dims must be positive"));
        }
        let preset = ScaleSchedule::preset(self.scheme.scheme(), ph, pw);
        let scales = match (&self.scales, &preset) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => p.scales.clone(),
            (None, None) => return Err(field("scales", "required for scheme custom")),
        };
        let fractions = match (&self.fractions, &preset) {
            (Some(f), _) => f.clone(),
            (None, Some(p)) if p.scales == scales => p.fractions.clone(),
            _ => vec![1.0; scales.len()],
        };
        ScaleSchedule::new(self.scheme.scheme(), scales, fractions, ph, pw)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let schedule = self.schedule()?;
        self.backend.validate().map_err(|e| match e {
            Error::Config { field: f, message } if !f.starts_with("backend.") => {
                field(&format!("backend.{f}"), message)
            }
            other => other,
        })?;
        if let Some(s) = &self.scales {
            if self.scheme == SchemeName::Ss && s.len() != 1 {
                return Err(field("scales", "scheme ss uses exactly one scale"));
            }
        }
        if !self.scheme.is_baseline() && self.fusion.uses_ecn() && !self.weights.is_empty() {
            let need = schedule.transitions();
            if self.weights.len() != need {
                return Err(field(
                    "weights",
                    format!(
                        "expected {need} weight files (one per transition), got {}",
                        self.weights.len()
                    ),
                ));
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| prefix("train", e))?;
        }
        if let Some(s) = &self.synth {
            if s.count == 0 {
                return Err(field("synth.count", "must be at least 1"));
            }
            if s.height == 0 || s.width == 0 {
                return Err(field("synth.height", "scene dims must be positive"));
            }
            if let Some(c) = s.classes {
                if !(2..=255).contains(&c) {
                    return Err(field("synth.classes", "must be in [2, 255]"));
                }
            }
            if let Some(p) = &s.profile {
                p.validate().map_err(|e| prefix("synth", e))?;
            }
        }
        if let Some(p) = &self.profile_scales {
            if p.is_empty() || p.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(field("profile_scales", "must be a non-empty list of positive scales"));
            }
        }
        Ok(())
    }
}

fn prefix(block: &str, e: Error) -> Error {
    match e {
        Error::Config { field: f, message } => field(&format!("{block}.{f}"), message),
        other => field(block, other.to_string()),
    }
}
