use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;

use sbss::backend::{generate_scenes, Backend, SceneProfile, SceneSet};
use sbss::ecm::{EcnArch, EcnWeights};
use sbss::evalx::{miou, profile_scales, ConfusionMatrix, IouReport};
use sbss::formats::{read_ecw, read_pgm, read_ppm, write_ecw, write_pgm, write_probmap};
use sbss::grid::LabelMap;
use sbss::pipeline::{run_ms, run_sbss, Diagnostics, RunConfig, RunResult};
use sbss::scheduler::{schedule_ratio, BudgetLedger, LedgerReport, ScaleSchedule};
use sbss::trainer::{build_training_set, train_with, TrainConfig};
use sbss::Error;

use crate::corpus::{ensure_dir, read_corpus, read_manifest, write_corpus, MANIFEST};
use crate::spec::RunSpec;

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Globals {
    /// The run config with `--seed` applied to every seed it contains.
    pub fn spec(&self) -> Result<RunSpec> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| anyhow!("this command needs a run config (--config <file>)"))?;
        let mut spec = RunSpec::load(path)?;
        if let Some(seed) = self.seed {
            spec.seed = seed;
            if let Some(t) = spec.train.as_mut() {
                t.seed = seed;
            }
            if let Some(o) = spec.backend.oracle.as_mut() {
                o.seed = seed;
            }
        }
        Ok(spec)
    }

    fn out_dir(&self, spec: Option<&RunSpec>) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| spec.and_then(|s| s.out.clone()))
            .ok_or_else(|| anyhow!("no output directory: pass --out or set `out` in the config"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn backend(spec: &RunSpec) -> Result<Backend> {
    Ok(Backend::from_spec(&spec.backend, Path::new("."))?)
}

fn scenes_dir(spec: &RunSpec) -> Result<&Path> {
    spec.scenes
        .as_deref()
        .ok_or_else(|| anyhow!("invalid config field `scenes`: a scene corpus directory is required"))
}

pub fn synth(g: &Globals) -> Result<()> {
    let spec = g.spec()?;
    let synth = spec
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("invalid config field `synth`: required by the synth command"))?;
    let oracle_classes = spec.backend.oracle.as_ref().map(|o| o.classes);
    let classes = synth.classes.or(oracle_classes).unwrap_or(4);
    let profile = synth
        .profile
        .clone()
        .unwrap_or_else(|| SceneProfile::default_for(classes));
    if profile.classes() != classes {
        return Err(Error::Config {
            field: "synth.profile".into(),
            message: format!("profile has {} classes, corpus has {classes}", profile.classes()),
        }
        .into());
    }
    let set = generate_scenes(&profile, synth.count, (synth.height, synth.width), spec.seed)?;
    let out = g.out_dir(Some(&spec))?;
    ensure_dir(&out)?;
    write_corpus(&out, &set, spec.seed)?;
    info!("wrote {} scenes to {}", set.len(), out.display());
    println!("{} scenes, {} classes -> {}", set.len(), classes, out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainLogRecord<'a> {
    transition: usize,
    #[serde(flatten)]
    line: &'a sbss::trainer::LogLine,
}

#[derive(Serialize)]
struct TrainSummary {
    transition: usize,
    from_scale: f64,
    to_scale: f64,
    samples: usize,
    initial_loss: f64,
    final_loss: f64,
    weights: PathBuf,
}

pub fn train_ecn(g: &Globals) -> Result<()> {
    let spec = g.spec()?;
    if spec.scheme.is_baseline() {
        bail!("invalid config field `scheme`: baseline schemes have no correction networks to train");
    }
    let schedule = spec.schedule()?;
    if schedule.transitions() == 0 {
        bail!("invalid config field `scales`: a single-scale schedule has no transitions to train");
    }
    let backend = backend(&spec)?;
    let scenes = read_corpus(scenes_dir(&spec)?)?;
    let out = g.out_dir(Some(&spec))?;
    ensure_dir(&out)?;
    let base = spec.train.clone().unwrap_or_default();
    let arch = EcnArch::standard(scenes.classes());
    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut summaries = Vec::new();
    for t in 0..schedule.transitions() {
        let samples = build_training_set(&backend, &scenes, &schedule, t)?;
        let cfg = TrainConfig {
            seed: base.seed.wrapping_add(t as u64),
            ..base.clone()
        };
        let mut io_err = None;
        let outcome = train_with(&cfg, arch, &samples, |line| {
            if line.iteration % 100 == 0 || line.iteration + 1 == cfg.iterations {
                info!("transition {t}: {line}");
            }
            let rec = TrainLogRecord { transition: t, line };
            if let Err(e) = serde_json::to_writer(&mut log_file, &rec)
                .map_err(anyhow::Error::from)
                .and_then(|_| writeln!(log_file).map_err(anyhow::Error::from))
            {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.context(format!("writing {}", log_path.display())));
        }
        let path = out.join(format!("ecn_t{t}.ecw"));
        write_ecw(&path, &outcome.weights)?;
        println!(
            "transition {t} ({} -> {}): {} samples, loss {:.4} -> {:.4}, {}",
            schedule.scales[t],
            schedule.scales[t + 1],
            samples.len(),
            outcome.initial_loss,
            outcome.final_loss,
            path.display()
        );
        summaries.push(TrainSummary {
            transition: t,
            from_scale: schedule.scales[t],
            to_scale: schedule.scales[t + 1],
            samples: samples.len(),
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss,
            weights: path,
        });
    }
    write_json(&out.join("train_summary.json"), &summaries)
}

/// Images to run: a single `.ppm`, or every scene of a corpus directory.
fn load_inputs(input: &Path) -> Result<Vec<(String, sbss::grid::RgbImage)>> {
    if input.is_dir() {
        let set = read_corpus(input)?;
        return Ok(set.scenes.into_iter().map(|s| (s.id, s.image)).collect());
    }
    let id = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("{}: cannot derive an image id from the file name", input.display()))?
        .to_string();
    Ok(vec![(id, read_ppm(input)?)])
}

fn load_weights(spec: &RunSpec, transitions: usize) -> Result<Vec<EcnWeights>> {
    if spec.scheme.is_baseline() || !spec.fusion.uses_ecn() {
        return Ok(Vec::new());
    }
    if spec.weights.len() != transitions {
        return Err(Error::Config {
            field: "weights".into(),
            message: format!(
                "fusion mode {:?} needs {transitions} weight files, got {}",
                spec.fusion,
                spec.weights.len()
            ),
        }
        .into());
    }
    spec.weights.iter().map(|p| Ok(read_ecw(p)?)).collect()
}

#[derive(Serialize)]
struct ImageReport {
    image_id: String,
    ledger: LedgerReport,
    diagnostics: Diagnostics,
}

pub fn infer(g: &Globals, input: Option<&Path>) -> Result<()> {
    let spec = g.spec()?;
    let schedule = spec.schedule()?;
    let backend = backend(&spec)?;
    let weights = load_weights(&spec, schedule.transitions())?;
    let input = match input {
        Some(p) => p.to_path_buf(),
        None => scenes_dir(&spec)?.to_path_buf(),
    };
    let images = load_inputs(&input)?;
    let out = g.out_dir(Some(&spec))?;
    ensure_dir(&out)?;
    let patch = (schedule.patch_h, schedule.patch_w);
    let cfg = if spec.scheme.is_baseline() {
        None
    } else {
        Some(RunConfig::new(schedule.clone(), spec.fusion, weights)?)
    };
    let mut total: Option<BudgetLedger> = None;
    for (id, image) in &images {
        let r: RunResult = match &cfg {
            Some(cfg) => run_sbss(cfg, &backend, id, image),
            None => run_ms(&backend, id, image, &schedule.scales, patch),
        }
        .with_context(|| format!("running {id}"))?;
        write_pgm(&out.join(format!("{id}.pgm")), &r.labels)?;
        write_probmap(&out.join(format!("{id}.tns")), &r.probs)?;
        write_json(
            &out.join(format!("{id}.json")),
            &ImageReport {
                image_id: id.clone(),
                ledger: r.ledger.report(),
                diagnostics: r.diagnostics,
            },
        )?;
        info!("{id}: processed-area ratio {:.4}", r.ledger.ratio());
        match total.as_mut() {
            Some(t) => t.merge(&r.ledger),
            None => total = Some(r.ledger),
        }
    }
    if let Some(t) = total {
        let report = t.report();
        write_json(&out.join("ledger.json"), &report)?;
        println!(
            "{} images -> {}; processed-area ratio {:.4} (schedule {:.4})",
            images.len(),
            out.display(),
            report.total_ratio,
            schedule_ratio(&schedule)
        );
    }
    Ok(())
}

/// Label files of `dir` keyed by id: corpus manifests are honoured, otherwise every `*.pgm`.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if dir.join(MANIFEST).is_file() {
        let m = read_manifest(dir)?;
        return Ok(m.scenes.into_iter().map(|e| (e.id, dir.join(e.labels))).collect());
    }
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for e in entries {
        let path = e
            .with_context(|| format!("reading directory {}", dir.display()))?
            .path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path);
            }
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct EvalReport {
    images: usize,
    classes: usize,
    iou: IouReport,
    /// Row-major `[gt][pred]` pixel counts.
    confusion: Vec<u64>,
}

pub fn eval(g: &Globals, pred_dir: &Path, gt_dir: &Path, classes: Option<usize>) -> Result<()> {
    let preds = label_files(pred_dir)?;
    if preds.is_empty() {
        bail!("{}: no prediction label maps (*.pgm) found", pred_dir.display());
    }
    let gts = label_files(gt_dir)?;
    let mut pairs: Vec<(String, LabelMap, LabelMap)> = Vec::with_capacity(preds.len());
    for (id, ppath) in &preds {
        let gpath = gts.get(id).cloned().unwrap_or_else(|| gt_dir.join(format!("{id}.pgm")));
        if !gpath.is_file() {
            bail!("missing ground truth for {id}: {} does not exist", gpath.display());
        }
        pairs.push((id.clone(), read_pgm(ppath)?, read_pgm(&gpath)?));
    }
    let classes = match classes {
        Some(c) => c,
        None if gt_dir.join(MANIFEST).is_file() => read_manifest(gt_dir)?.classes,
        None => {
            let max = pairs
                .iter()
                .flat_map(|(_, p, t)| p.data().iter().chain(t.data()))
                .filter(|&&l| l != sbss::grid::IGNORE_LABEL)
                .max()
                .copied()
                .unwrap_or(0);
            (max as usize + 1).max(2)
        }
    };
    let mut cm = ConfusionMatrix::new(classes)?;
    for (id, pred, gt) in &pairs {
        cm.accumulate(pred, gt).with_context(|| format!("evaluating {id}"))?;
    }
    let report = miou(&cm);
    let csv = report.to_csv()?;
    match g.out.clone() {
        Some(out) => {
            ensure_dir(&out)?;
            write_text(&out.join("iou.csv"), &csv)?;
            write_json(
                &out.join("metrics.json"),
                &EvalReport {
                    images: pairs.len(),
                    classes,
                    iou: report.clone(),
                    confusion: cm.counts().to_vec(),
                },
            )?;
        }
        None => print!("{csv}"),
    }
    match report.mean {
        Some(m) => println!("mIoU {m:.6} over {} images", pairs.len()),
        None => println!("mIoU undefined over {} images", pairs.len()),
    }
    Ok(())
}

pub fn profile(g: &Globals, scales: Option<Vec<f64>>) -> Result<()> {
    let spec = g.spec()?;
    let schedule = spec.schedule()?;
    let scales = scales
        .or_else(|| spec.profile_scales.clone())
        .unwrap_or_else(|| schedule.scales.clone());
    let backend = backend(&spec)?;
    let scenes: SceneSet = read_corpus(scenes_dir(&spec)?)?;
    let table = profile_scales(&backend, &scenes, &scales, (schedule.patch_h, schedule.patch_w))?;
    let csv = table.to_csv()?;
    let out = g.out_dir(Some(&spec))?;
    ensure_dir(&out)?;
    write_text(&out.join("scale_preference.csv"), &csv)?;
    write_json(&out.join("scale_preference.json"), &table)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct BudgetRow {
    scheme: String,
    scales: Vec<f64>,
    fractions: Vec<f64>,
    ratio: f64,
}

pub fn budget(g: &Globals) -> Result<()> {
    let rows: Vec<BudgetRow> = match &g.config {
        Some(_) => {
            let spec = g.spec()?;
            vec![row(spec.scheme.as_str().to_string(), &spec.schedule()?)]
        }
        None => [
            ("ecs_ms", ScaleSchedule::ecs_ms(1, 1)),
            ("ms", ScaleSchedule::baseline_ms(1, 1)),
            ("ecs_ss", ScaleSchedule::ecs_ss(1, 1)),
            ("ss", ScaleSchedule::baseline_ss(1, 1)),
        ]
        .iter()
        .map(|(n, s)| row(n.to_string(), s))
        .collect(),
    };
    println!("{:<8} {:>10}  scales / fractions", "scheme", "ratio");
    for r in &rows {
        let pairs: Vec<String> = r
            .scales
            .iter()
            .zip(&r.fractions)
            .map(|(s, f)| format!("{s}x{f:.4}"))
            .collect();
        println!("{:<8} {:>9.2}%  {}", r.scheme, r.ratio * 100.0, pairs.join(" "));
    }
    if let Some(out) = &g.out {
        ensure_dir(out)?;
        write_json(&out.join("budget.json"), &rows)?;
    }
    Ok(())
}

fn row(scheme: String, s: &ScaleSchedule) -> BudgetRow {
    BudgetRow {
        scheme,
        scales: s.scales.clone(),
        fractions: s.fractions.clone(),
        ratio: schedule_ratio(s),
    }
}
