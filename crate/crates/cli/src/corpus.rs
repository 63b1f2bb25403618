//! On-disk scene corpus: `manifest.json`, `images/<id>.ppm`, `labels/<id>.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sbss::backend::{Scene, SceneProfile, SceneSet};
use sbss::formats::{read_pgm, read_ppm, write_pgm, write_ppm};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    /// Paths relative to the corpus directory.
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub classes: usize,
    pub seed: u64,
    pub profile: SceneProfile,
    pub scenes: Vec<CorpusEntry>,
}

pub fn write_corpus(dir: &Path, set: &SceneSet, seed: u64) -> Result<()> {
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    let mut entries = Vec::with_capacity(set.len());
    for s in &set.scenes {
        let image = PathBuf::from("images").join(format!("{}.ppm", s.id));
        let labels = PathBuf::from("labels").join(format!("{}.pgm", s.id));
        write_ppm(&dir.join(&image), &s.image)?;
        write_pgm(&dir.join(&labels), &s.labels)?;
        entries.push(CorpusEntry {
            id: s.id.clone(),
            image,
            labels,
        });
    }
    let manifest = CorpusManifest {
        classes: set.classes(),
        seed,
        profile: set.profile.clone(),
        scenes: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: CorpusManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.profile.classes() != m.classes {
        bail!(
            "{}: profile has {} classes, manifest says {}",
            path.display(),
            m.profile.classes(),
            m.classes
        );
    }
    Ok(m)
}

pub fn read_corpus(dir: &Path) -> Result<SceneSet> {
    let m = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(m.scenes.len());
    for e in &m.scenes {
        let image = read_ppm(&dir.join(&e.image))?;
        let lpath = dir.join(&e.labels);
        let labels = read_pgm(&lpath)?;
        if image.dims() != labels.dims() {
            bail!(
                "{}: labels are {:?} but image {} is {:?}",
                lpath.display(),
                labels.dims(),
                e.image.display(),
                image.dims()
            );
        }
        labels
            .check_classes(m.classes)
            .with_context(|| format!("{}", lpath.display()))?;
        scenes.push(Scene {
            id: e.id.clone(),
            image,
            labels,
        });
    }
    Ok(SceneSet {
        profile: m.profile,
        scenes,
    })
}

/// Creates the output directory if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
