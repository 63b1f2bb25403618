//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbss::backend::{generate_scenes, Backend, OracleConfig, Scene, SceneProfile, SceneSet};
use sbss::ecm::{act_fuse, ad_map, correct, ecn_forward, EcnArch, EcnWeights, FusionMode};
use sbss::evalx::{miou, profile_scales, ConfusionMatrix};
use sbss::formats::{decode_ecw, decode_tns, encode_ecw, encode_tns, read_ecw, read_tns, write_ecw, write_tns, Tensor};
use sbss::grid::{confidence_map, resize_probmap, ProbMap};
use sbss::pipeline::{run_ms, run_sbss, RunConfig, RunResult};
use sbss::scheduler::{ms_vote, schedule_ratio, ScaleSchedule, BASELINE_MS_SCALES};
use sbss::trainer::{build_training_set, check_gradients, train, GradCheckOptions, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ac1_budget() -> Outcome {
    let expected = [
        (ScaleSchedule::ecs_ms(128, 128), 5.625),
        (ScaleSchedule::baseline_ms(128, 128), 8.6875),
        (ScaleSchedule::ecs_ss(128, 128), 0.75),
        (ScaleSchedule::baseline_ss(128, 128), 1.0),
    ];
    for (s, want) in &expected {
        let got = schedule_ratio(s);
        ensure(got == *want, || {
            format!("{:?} schedule ratio {got} != {want}", s.scheme)
        })?;
    }
    let backend = Backend::from_oracle(OracleConfig::default()).map_err(|e| e.to_string())?;
    let scenes = generate_scenes(&SceneProfile::default_for(4), 1, (512, 512), 5).map_err(|e| e.to_string())?;
    let scene = &scenes.scenes[0];
    let mut executed = Vec::new();
    for (s, want) in &expected {
        let ratio = match s.scheme {
            sbss::scheduler::Scheme::BaselineMs | sbss::scheduler::Scheme::BaselineSs => {
                run_ms(&backend, &scene.id, &scene.image, &s.scales, (128, 128))
            }
            _ => RunConfig::new(s.clone(), FusionMode::ActOnly, vec![])
                .and_then(|cfg| run_sbss(&cfg, &backend, &scene.id, &scene.image)),
        }
        .map_err(|e| e.to_string())?
        .ledger
        .ratio();
        ensure(ratio == *want, || {
            format!("{:?} executed ratio {ratio} != {want}", s.scheme)
        })?;
        executed.push(ratio);
    }
    Ok(format!("ratios {executed:?} on 512x512, patch 128"))
}

fn ac2_miou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let c = rng.gen_range(2..=5);
        let pred = common::random_labels(&mut rng, c, 16, 16);
        let gt = common::random_labels(&mut rng, c, 16, 16);
        let mut cm = ConfusionMatrix::new(c).map_err(|e| e.to_string())?;
        cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let got = miou(&cm).mean;
        let want = common::brute_miou(&pred, &gt, c);
        ensure(got == want, || format!("instance {i}: {got:?} != {want:?}"))?;
    }
    let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 1, 3, 1, 0, 1, 4]).map_err(|e| e.to_string())?;
    let m = miou(&cm).mean.ok_or("fixed case undefined")?;
    ensure((m - 38.0 / 63.0).abs() <= 1e-12, || format!("fixed case {m} != 38/63"))?;
    Ok(format!("100 random instances exact, fixed case {m:.12}"))
}

fn ac3_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0f64;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut w = EcnWeights::kaiming(EcnArch::standard(3), seed).map_err(|e| e.to_string())?;
        for b in &mut w.blocks {
            for v in b.dw_b.iter_mut().chain(&mut b.exp_b).chain(&mut b.proj_b) {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let lower = common::random_probmap(&mut rng, 3, 8, 8);
        let upper = common::random_probmap(&mut rng, 3, 8, 8);
        let target = common::random_labels(&mut rng, 3, 8, 8);
        let r = check_gradients(&w.cast::<f64>(), &lower, &upper, &target, GradCheckOptions::default())
            .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_err());
        ensure(r.passed(), || {
            let bad: Vec<_> = r
                .tensors
                .iter()
                .filter(|t| !t.passed)
                .map(|t| (&t.name, t.rel_err))
                .collect();
            format!("seed {seed}: tensors over tolerance {bad:?}")
        })?;
    }
    Ok(format!(
        "3 seeds, worst tensor relative error {worst:.2e}, {:.0} s",
        t.elapsed().as_secs_f64()
    ))
}

fn ac4_reference() -> Outcome {
    let mut worst = 0f64;
    for (seed, c, h, w) in [(1u64, 2, 4, 4), (2, 3, 8, 8), (3, 4, 6, 9), (4, 5, 3, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = EcnWeights::kaiming(EcnArch::standard(c), seed).map_err(|e| e.to_string())?;
        for b in &mut weights.blocks {
            for v in b.dw_b.iter_mut().chain(&mut b.exp_b).chain(&mut b.proj_b) {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let lower = common::random_probmap(&mut rng, c, h, w);
        let upper = common::random_probmap(&mut rng, c, h, w);
        let got = ecn_forward(&weights, &lower, &upper).map_err(|e| e.to_string())?;
        let want = common::ecn_reference(&weights, &lower, &upper);
        for (ch, plane) in want.iter().enumerate() {
            for (y, row) in plane.iter().enumerate() {
                for (x, &v) in row.iter().enumerate() {
                    worst = worst.max((got.get(ch, y, x) as f64 - v).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max abs diff {worst:.2e}"))?;
    Ok(format!("max abs diff {worst:.2e}"))
}

fn ac5_act() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let base = common::random_probmap(&mut rng, c, h, w);
        let cand = common::random_probmap(&mut rng, c, h, w);
        let n = h * w;
        let f = act_fuse(&base, &cand).map_err(|e| e.to_string())?;
        ensure(f.replaced() <= n.div_ceil(2), || {
            format!("map {i}: {} of {n} replaced", f.replaced())
        })?;
        let ad = ad_map(&confidence_map(&base), &confidence_map(&cand)).map_err(|e| e.to_string())?;
        let mut sorted = ad.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        ensure(f.threshold == sorted[n / 2], || {
            format!("map {i}: threshold is not the median AD")
        })?;
        for (p, &m) in f.mask.iter().enumerate() {
            let strict = ad.data()[p] > f.threshold;
            ensure(m == strict, || {
                format!("map {i} pixel {p}: mask {m}, AD above threshold {strict}")
            })?;
            let src = if m { &cand } else { &base };
            for ch in 0..c {
                let (y, x) = (p / w, p % w);
                ensure(f.map.get(ch, y, x).to_bits() == src.get(ch, y, x).to_bits(), || {
                    format!("map {i} pixel {p}: value not taken from the selected source")
                })?;
            }
        }
        let flat = ProbMap::uniform(c, h, w).map_err(|e| e.to_string())?;
        let fc = act_fuse(&flat, &flat).map_err(|e| e.to_string())?;
        ensure(fc.replaced() == 0, || {
            format!("map {i}: constant map replaced {}", fc.replaced())
        })?;
        let fi = act_fuse(&base, &base).map_err(|e| e.to_string())?;
        let same = fi
            .map
            .data()
            .iter()
            .zip(base.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("map {i}: fusion with itself changed bytes"))?;
    }
    Ok("1000 random maps".into())
}

fn ac6_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let weights: Vec<EcnWeights> = (2..=5)
        .map(|c| EcnWeights::kaiming(EcnArch::standard(c), c as u64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut worst = 0f32;
    for i in 0..300 {
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let a = common::random_probmap(&mut rng, c, h, w);
        let b = common::random_probmap(&mut rng, c, h, w);
        let (oh, ow) = (rng.gen_range(1..=14), rng.gen_range(1..=14));
        let mut outputs = vec![
            resize_probmap(&a, oh, ow).map_err(|e| e.to_string())?,
            ms_vote(&[a.clone(), b.clone()], oh, ow).map_err(|e| e.to_string())?,
        ];
        for mode in [FusionMode::ActOnly, FusionMode::EcnOnly, FusionMode::EcnAct] {
            outputs.push(
                correct(mode, Some(&weights[c - 2]), &a, &b)
                    .map_err(|e| e.to_string())?
                    .map,
            );
        }
        for (k, o) in outputs.iter().enumerate() {
            let d = o.max_sum_deviation();
            worst = worst.max(d);
            ensure(d <= 1e-5, || {
                format!("case {i} output {k}: channel sum deviation {d:.2e}")
            })?;
        }
    }
    Ok(format!("300 random cases x 5 operators, worst deviation {worst:.2e}"))
}

fn run_corpus(cfg: &RunConfig, backend: &Backend, scenes: &SceneSet) -> Result<Vec<RunResult>, String> {
    scenes
        .scenes
        .iter()
        .map(|s| run_sbss(cfg, backend, &s.id, &s.image).map_err(|e| e.to_string()))
        .collect()
}

fn ac7_determinism() -> Outcome {
    let backend = Backend::from_oracle(OracleConfig::default()).map_err(|e| e.to_string())?;
    let scenes = generate_scenes(&SceneProfile::default_for(4), 10, (80, 72), 7).map_err(|e| e.to_string())?;
    let weights: Vec<EcnWeights> = (0..4)
        .map(|t| EcnWeights::kaiming(EcnArch::standard(4), t))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (sched, mode) in [
        (ScaleSchedule::ecs_ms(32, 32), FusionMode::EcnAct),
        (ScaleSchedule::ecs_ss(32, 32), FusionMode::EcnAct),
        (ScaleSchedule::ecs_ss(32, 32), FusionMode::ActOnly),
    ] {
        let w = if mode.uses_ecn() {
            weights[..sched.transitions()].to_vec()
        } else {
            vec![]
        };
        let cfg = RunConfig::new(sched, mode, w).map_err(|e| e.to_string())?;
        let reference = run_corpus(&cfg, &backend, &scenes)?;
        let fingerprint = |rs: &[RunResult]| -> Vec<Vec<u32>> {
            rs.iter()
                .map(|r| r.probs.data().iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        let want = fingerprint(&reference);
        for threads in [1, 4, 8, 0] {
            let got = if threads == 0 {
                run_corpus(&cfg, &backend, &scenes)?
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| e.to_string())?
                    .install(|| run_corpus(&cfg, &backend, &scenes))?
            };
            ensure(fingerprint(&got) == want, || {
                format!("{mode:?}: output differs with {threads} workers")
            })?;
            ensure(
                got.iter()
                    .zip(&reference)
                    .all(|(a, b)| a.labels == b.labels && a.ledger == b.ledger),
                || format!("{mode:?}: labels or ledger differ with {threads} workers"),
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "10 scenes, {checked} reruns over worker counts 1/4/8, byte-identical"
    ))
}

fn corpus_miou(scenes: &SceneSet, f: impl Fn(&Scene) -> sbss::Result<RunResult>) -> Result<f64, String> {
    let mut cm = ConfusionMatrix::new(scenes.classes()).map_err(|e| e.to_string())?;
    for s in &scenes.scenes {
        let r = f(s).map_err(|e| e.to_string())?;
        cm.accumulate(&r.labels, &s.labels).map_err(|e| e.to_string())?;
    }
    miou(&cm).mean.ok_or_else(|| "mIoU undefined".to_string())
}

fn ac8_stacking() -> Outcome {
    let t = Instant::now();
    let oracle = OracleConfig {
        classes: 4,
        preferred_scales: vec![0.5, 0.5, 1.0, 1.5],
        e_min: 0.05,
        e_max: 0.5,
        gain: 0.15,
        ..OracleConfig::default()
    };
    let prefs = oracle.preferred_scales.clone();
    let backend = Backend::from_oracle(oracle).map_err(|e| e.to_string())?;
    let profile = SceneProfile::default_for(4);
    let train_scenes = generate_scenes(&profile, 40, (96, 96), 11).map_err(|e| e.to_string())?;
    let test_scenes = generate_scenes(&profile, 30, (96, 96), 22).map_err(|e| e.to_string())?;
    let patch = (48, 48);

    let table = profile_scales(&backend, &test_scenes, &[0.5, 1.0, 1.5], patch).map_err(|e| e.to_string())?;
    let best = table.best_scales();
    let recovered = best.iter().zip(&prefs).filter(|(b, p)| **b == Some(**p)).count();

    let sched = ScaleSchedule::ecs_ms(patch.0, patch.1);
    let mut weights = Vec::with_capacity(sched.transitions());
    for tr in 0..sched.transitions() {
        let samples = build_training_set(&backend, &train_scenes, &sched, tr).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            iterations: 1000,
            batch_size: 8,
            crop: Some(24),
            hflip: true,
            seed: tr as u64,
            ..TrainConfig::default()
        };
        weights.push(train(&cfg, &samples).map_err(|e| e.to_string())?.weights);
    }
    let ecn_act = RunConfig::new(sched.clone(), FusionMode::EcnAct, weights).map_err(|e| e.to_string())?;
    let act_only = RunConfig::new(sched, FusionMode::ActOnly, vec![]).map_err(|e| e.to_string())?;
    let m_sbss = corpus_miou(&test_scenes, |s| run_sbss(&ecn_act, &backend, &s.id, &s.image))?;
    let m_act = corpus_miou(&test_scenes, |s| run_sbss(&act_only, &backend, &s.id, &s.image))?;
    let m_ms = corpus_miou(&test_scenes, |s| {
        run_ms(&backend, &s.id, &s.image, &BASELINE_MS_SCALES, patch)
    })?;

    let summary = format!(
        "preferred scales recovered {recovered}/4 (best {best:?}); mIoU ecn_act {m_sbss:.4}, act_only {m_act:.4}, baseline MS {m_ms:.4}; {:.0} s",
        t.elapsed().as_secs_f64()
    );
    let mut failed = Vec::new();
    if recovered < 3 {
        failed.push("(a) fewer than 3 preferred scales recovered");
    }
    if m_sbss < m_ms {
        failed.push("(b) ecn_act below baseline MS");
    }
    if m_sbss < m_act {
        failed.push("(c) ecn_act below act_only");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failed.join(", ")))
    }
}

fn ac9_formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..200 {
        let rank = rng.gen_range(0..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..=5)).collect();
        let n = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen())).collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        let bytes = encode_tns(&t);
        let back = decode_tns(&bytes).map_err(|e| e.to_string())?;
        ensure(encode_tns(&back) == bytes, || format!("tns payload {i} not byte-exact"))?;
        let path = dir.path().join("t.tns");
        write_tns(&path, &back).map_err(|e| e.to_string())?;
        let reread = read_tns(&path).map_err(|e| e.to_string())?;
        ensure(encode_tns(&reread) == bytes, || format!("tns file {i} not byte-exact"))?;
    }
    for i in 0..20 {
        let arch = EcnArch {
            classes: rng.gen_range(2..=6),
            width: rng.gen_range(1..=8),
            blocks: rng.gen_range(0..=3),
            stem_kernel: 2 * rng.gen_range(0..=2) + 1,
            dw_kernel: 2 * rng.gen_range(0..=3) + 1,
        };
        let mut w = EcnWeights::zeros(arch).map_err(|e| e.to_string())?;
        common::randomize(&mut w, &mut rng, 3.0);
        let bytes = encode_ecw(&w);
        let back = decode_ecw(&bytes).map_err(|e| e.to_string())?;
        ensure(encode_ecw(&back) == bytes, || format!("ecw payload {i} not byte-exact"))?;
        let path = dir.path().join("w.ecw");
        write_ecw(&path, &back).map_err(|e| e.to_string())?;
        let reread = read_ecw(&path).map_err(|e| e.to_string())?;
        ensure(encode_ecw(&reread) == bytes, || format!("ecw file {i} not byte-exact"))?;
    }
    Ok("200 tensors, 20 weight files".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("budget exactness", ac1_budget),
        ("mIoU oracle equivalence", ac2_miou),
        ("ECN gradient fidelity", ac3_gradients),
        ("convolution reference equivalence", ac4_reference),
        ("ACT contract", ac5_act),
        ("normalization conservation", ac6_normalization),
        ("determinism", ac7_determinism),
        ("hypothesis and stacking gain", ac8_stacking),
        ("format round trips", ac9_formats),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
