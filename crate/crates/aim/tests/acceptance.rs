//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed even
//! when all criteria pass. Exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aim::checkpoint::{encode, load, save, save_subset};
use aim_core::gradcheck::{check_model, perturbed_model, sample_coordinates, ModelCheck};
use aim_core::model::{count_params, AdaptationPolicy, AimModel, Mode, Positions};
use aim_core::optim::{AdamW, AdamWConfig};
use aim_core::params::{Forward, Trainable};
use aim_core::toy::{permute_frames, TaskKind, ToyGenerator, ToyVideoTask};
use aim_core::train::{train_step, ToyRun};
use aim_core::vit::{init_backbone, space_only_forward};
use aim_core::{seeded_rng, ParamStore, Tensor, VitConfig};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Rounds to the number of decimals published for that entry.
fn at_precision(m: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (m * f + 0.5).floor() / f
}

struct Row {
    label: &'static str,
    config: VitConfig,
    policy: AdaptationPolicy,
    published: f64,
    decimals: i32,
}

fn check_rows(rows: &[Row]) -> Outcome {
    let mut report = Vec::new();
    let mut misses = Vec::new();
    for r in rows {
        let c = count_params(&r.config, &r.policy).map_err(|e| e.to_string())?;
        let m = c.tunable as f64 / 1e6;
        let got = at_precision(m, r.decimals);
        report.push(format!("{} {:.3}M->{}", r.label, m, got));
        if (got - r.published).abs() > 1e-9 {
            misses.push(format!("{}: {:.3}M rounds to {got}, published {}", r.label, m, r.published));
        }
    }
    if misses.is_empty() {
        Ok(report.join(", "))
    } else {
        Err(misses.join("; "))
    }
}

fn aim_policy(ratio: f64, pre: bool, positions: Positions) -> AdaptationPolicy {
    AdaptationPolicy {
        ratio,
        pre_temporal_adapter: pre,
        positions,
        ..AdaptationPolicy::default()
    }
}

fn criterion_1() -> Outcome {
    let b174 = VitConfig::vit_b16(174, 8);
    let b400 = VitConfig::vit_b16(400, 8);
    let l400 = VitConfig::vit_l14(400, 8);
    let rows = [
        Row { label: "spatial", config: b174.clone(), policy: AdaptationPolicy::with_mode(Mode::Spatial), published: 3.7, decimals: 1 },
        Row {
            label: "spatial+temporal+pre",
            config: b174.clone(),
            policy: AdaptationPolicy { pre_temporal_adapter: true, ..AdaptationPolicy::with_mode(Mode::SpatialTemporal) },
            published: 10.8,
            decimals: 1,
        },
        Row { label: "aim(4/block)", config: b174, policy: aim_policy(0.25, true, Positions::All), published: 14.3, decimals: 1 },
        Row { label: "vitb16 k400", config: b400, policy: AdaptationPolicy::default(), published: 11.0, decimals: 0 },
        Row { label: "vitl14 k400", config: l400, policy: AdaptationPolicy::default(), published: 38.0, decimals: 0 },
    ];
    check_rows(&rows)
}

fn criterion_2() -> Outcome {
    let b = VitConfig::vit_b16(400, 8);
    let mut rows = Vec::new();
    for (label, ratio, published, decimals) in [
        ("r=0.0625", 0.0625, 3.0, 0),
        ("r=0.125", 0.125, 5.6, 1),
        ("r=0.25", 0.25, 11.0, 0),
        ("r=0.5", 0.5, 21.0, 0),
    ] {
        rows.push(Row { label, config: b.clone(), policy: aim_policy(ratio, false, Positions::All), published, decimals });
    }
    for (label, pos) in [("top6", Positions::Top(6)), ("bottom6", Positions::Bottom(6)), ("every-other", Positions::EveryOther)] {
        rows.push(Row { label, config: b.clone(), policy: aim_policy(0.25, false, pos), published: 5.6, decimals: 1 });
    }
    check_rows(&rows)
}

fn criterion_3() -> Outcome {
    let mut worst = 0f32;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(1000 + seed);
        let (width, heads) = *[(8, 2), (12, 3), (16, 4), (24, 2), (32, 4)].choose(&mut rng).unwrap();
        let (image_size, patch_size) = *[(4, 2), (8, 4), (8, 2), (6, 3)].choose(&mut rng).unwrap();
        let cfg = VitConfig {
            image_size,
            patch_size,
            channels: rng.gen_range(1..=3),
            width,
            depth: rng.gen_range(1..=3),
            heads,
            mlp_ratio: rng.gen_range(1..=4),
            frames: rng.gen_range(1..=4),
            num_classes: rng.gen_range(2..=5),
            stochastic_depth_rate: 0.0,
        };
        let mode = *[Mode::Spatial, Mode::SpatialTemporal, Mode::Aim].choose(&mut rng).unwrap();
        let temporal = mode != Mode::Spatial;
        let policy = AdaptationPolicy {
            mode,
            ratio: *[0.125, 0.25, 0.5].choose(&mut rng).unwrap(),
            positions: *[Positions::All, Positions::Top(1), Positions::Bottom(1), Positions::EveryOther].choose(&mut rng).unwrap(),
            pre_temporal_adapter: temporal && rng.gen_bool(0.5),
            scale: rng.gen_range(0.1..2.0),
            temporal_pos_embed: temporal && rng.gen_bool(0.5),
        };
        let shape = [2, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size];
        let video = Tensor::<f32>::from_fn(&shape, |_| rng.gen_range(-2.0..2.0));
        let model = AimModel::<f32>::init(&cfg, &policy, &mut rng).map_err(|e| e.to_string())?;
        let adapted = model.classify(&video).map_err(|e| e.to_string())?;
        let mut ctx = Forward::new(&model.params, Trainable::Nothing);
        let plain = space_only_forward(&mut ctx, &video, &cfg).map_err(|e| e.to_string())?;
        let d = adapted.max_abs_diff(ctx.graph.value(plain)).map_err(|e| e.to_string())?;
        worst = worst.max(d);
        ensure(d <= 1e-5, format!("seed {seed}: difference {d:e}"))?;
    }
    Ok(format!("20 configs, max |AIM - space-only| = {worst:e}"))
}

fn criterion_4() -> Outcome {
    let cfg = VitConfig::tiny(2, 3);
    let policies = [
        AdaptationPolicy::with_mode(Mode::Spatial),
        AdaptationPolicy { pre_temporal_adapter: true, ..AdaptationPolicy::with_mode(Mode::SpatialTemporal) },
        AdaptationPolicy { pre_temporal_adapter: true, temporal_pos_embed: true, ..AdaptationPolicy::default() },
    ];
    let steps = 200;
    for policy in policies {
        let mut model = AimModel::<f32>::init(&cfg, &policy, &mut seeded_rng(3)).map_err(|e| e.to_string())?;
        let part = model.partition();
        let before = model.params.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.params, &part).map_err(|e| e.to_string())?;
        let task = ToyVideoTask::new(TaskKind::MatchAcrossFrames, cfg.image_size, cfg.frames, 1);
        let mut gen = ToyGenerator::new(task, 2).map_err(|e| e.to_string())?;
        for step in 0..steps {
            let batch = gen.next_batch(4);
            train_step(&mut model, &part, &mut opt, &batch, 3e-3, 0.0, None, step).map_err(|e| e.to_string())?;
        }
        for name in &part.frozen {
            let (a, b) = (before.get(name).unwrap(), model.params.get(name).unwrap());
            ensure(
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                format!("{:?}: frozen `{name}` changed", policy.mode),
            )?;
        }
        let state: BTreeSet<String> = opt.state_names().map(String::from).collect();
        ensure(state == part.tunable, format!("{:?}: optimizer state differs from tunable set", policy.mode))?;
    }
    Ok(format!("{steps} steps each for spatial, spatial-temporal and aim; frozen bitwise equal"))
}

fn criterion_5() -> Outcome {
    let cfg = VitConfig::tiny(3, 2);
    let policy = AdaptationPolicy { pre_temporal_adapter: true, temporal_pos_embed: true, ..AdaptationPolicy::default() };
    let opts = ModelCheck { coordinates: 240, tolerance: 1e-4, seed: 21, ..ModelCheck::default() };
    let model = perturbed_model(&cfg, &policy, opts.seed).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let coords = sample_coordinates(&model.params, &names, opts.coordinates, &mut seeded_rng(aim_core::derive_seed(opts.seed, 2)));
    for family in ["adapter", ".attn.", ".mlp.", "norm", "head."] {
        ensure(coords.iter().any(|c| c.name.contains(family)), format!("no `{family}` coordinates sampled"))?;
    }
    let r = check_model(&cfg, &policy, &opts).map_err(|e| e.to_string())?;
    ensure(r.checked >= 200, "fewer than 200 coordinates")?;
    ensure(r.passed, format!("max relative error {:e} at {:?}", r.max_rel_error, r.worst.map(|w| w.coordinate)))?;
    Ok(format!("{} coordinates in f64, max relative error {:.2e}", r.checked, r.max_rel_error))
}

fn criterion_6() -> Outcome {
    let mut worst = 0f32;
    let mut check = |model: &AimModel<f32>, cfg: &VitConfig, seed: u64| -> Result<(), String> {
        let mut rng = seeded_rng(seed);
        let shape = [3, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size];
        let x = Tensor::<f32>::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let base = model.classify(&x).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            let mut perm: Vec<usize> = (0..cfg.frames).collect();
            perm.shuffle(&mut rng);
            let d = base.max_abs_diff(&model.classify(&permute_frames(&x, &perm)).unwrap()).unwrap();
            worst = worst.max(d);
            ensure(d <= 1e-5, format!("permutation {perm:?} moved logits by {d:e}"))?;
        }
        Ok(())
    };
    for seed in 0..12u64 {
        let mode = [Mode::Spatial, Mode::SpatialTemporal, Mode::Aim][seed as usize % 3];
        let policy = AdaptationPolicy { pre_temporal_adapter: mode != Mode::Spatial, ..AdaptationPolicy::with_mode(mode) };
        let cfg = VitConfig::tiny(3, 2 + seed as usize % 3);
        let model = perturbed_model(&cfg, &policy, seed).map_err(|e| e.to_string())?.cast::<f32>();
        check(&model, &cfg, seed + 50)?;
    }
    let mut run = ToyRun::recipe(TaskKind::MatchAcrossFrames, Mode::Aim, false, 7);
    run.train.steps = 100;
    let trained = run.execute().map_err(|e| e.to_string())?;
    check(&trained.model, &run.vit, 99)?;
    Ok(format!("12 random models and one trained model, max deviation {worst:e}"))
}

fn ladder_run(mode: Mode, seed: u64) -> Result<f64, String> {
    ToyRun::recipe(TaskKind::MatchAcrossFrames, mode, false, seed)
        .execute()
        .map(|o| o.accuracy)
        .map_err(|e| e.to_string())
}

/// Thresholds fixed from the committed baseline runs.
const CHANCE: f64 = 0.5;
const PROBE_CEILING: f64 = CHANCE + 0.10;
const TEMPORAL_FLOOR: f64 = 0.90;
const SPATIAL_MARGIN: f64 = 0.03;
const TEMPORAL_MARGIN: f64 = 0.10;
/// Both temporal arms saturate; one of 1000 eval clips separates them.
const SATURATION_TIE: f64 = 0.005;

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let frozen = ladder_run(Mode::FrozenSpaceOnly, seed)?;
        let spatial = ladder_run(Mode::Spatial, seed)?;
        let st = ladder_run(Mode::SpatialTemporal, seed)?;
        let aim = ladder_run(Mode::Aim, seed)?;
        let line = format!("seed {seed}: {frozen:.3} < {spatial:.3} < {st:.3} <= {aim:.3} (+{SATURATION_TIE} tie)");
        println!("    {line}");
        ensure(frozen <= PROBE_CEILING, format!("{line}: head-only probe above chance + 10"))?;
        ensure(spatial >= frozen + SPATIAL_MARGIN, format!("{line}: spatial not above head-only"))?;
        ensure(st >= spatial + TEMPORAL_MARGIN, format!("{line}: spatial-temporal not above spatial"))?;
        ensure(st <= aim + SATURATION_TIE, format!("{line}: spatial-temporal above aim"))?;
        ensure(aim >= TEMPORAL_FLOOR, format!("{line}: aim below 0.90"))?;
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let run = |tpe| {
            ToyRun::recipe(TaskKind::OrderedMotion, Mode::Aim, tpe, seed)
                .execute()
                .map(|o| o.accuracy)
                .map_err(|e| e.to_string())
        };
        let (off, on) = (run(false)?, run(true)?);
        let line = format!("seed {seed}: without {off:.3}, with {on:.3}");
        println!("    {line}");
        ensure((off - CHANCE).abs() <= 0.10, format!("{line}: order-blind model left the chance band"))?;
        ensure(on >= TEMPORAL_FLOOR, format!("{line}: temporal embedding run below 0.90"))?;
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut run = ToyRun::recipe(TaskKind::MatchAcrossFrames, Mode::Aim, true, 5);
    run.train.steps = 20;
    run.train.eval_samples = 64;
    let out = run.execute().map_err(|e| e.to_string())?;
    let full = dir.join("full.aimc");
    save(&full, &out.model.params).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&full).map_err(|e| e.to_string())?;
    let back: ParamStore<f32> = load(&full).map_err(|e| e.to_string())?;
    ensure(encode(&back) == bytes, "save -> load -> save changed bytes")?;

    let part = dir.join("adapters.aimc");
    save_subset(&part, &out.model.params, out.partition.tunable.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let adapters: ParamStore<f32> = load(&part).map_err(|e| e.to_string())?;
    let backbone = init_backbone::<f32>(&run.vit, &mut seeded_rng(run.train.model_seed())).map_err(|e| e.to_string())?;
    let mut fresh = AimModel::from_backbone(&run.vit, &run.policy, backbone, &mut seeded_rng(12345)).map_err(|e| e.to_string())?;
    fresh.params.overwrite_from(&adapters).map_err(|e| e.to_string())?;
    for name in &out.partition.tunable {
        ensure(fresh.params.get(name) == out.model.params.get(name), format!("`{name}` not restored"))?;
    }
    Ok(format!("{} bytes full, {} tunable tensors restored", bytes.len(), adapters.len()))
}

fn criterion_10(dir: &Path) -> Outcome {
    let run = |tag: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_aim"))
            .args(["train", "--steps", "150", "--seed", "3", "--eval-samples", "200"])
            .args(["--checkpoint", &format!("{tag}.aimc"), "--log", &format!("{tag}.jsonl")])
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), format!("train exited with {:?}", status.status.code()))?;
        let log = std::fs::read(dir.join(format!("{tag}.jsonl"))).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(dir.join(format!("{tag}.aimc"))).map_err(|e| e.to_string())?;
        Ok::<_, String>((log, ckpt))
    };
    let (a, b) = (run("first")?, run("second")?);
    ensure(a.0 == b.0, "logs differ")?;
    ensure(a.1 == b.1, "checkpoints differ")?;
    Ok(format!("150-step runs identical ({} log bytes, {} checkpoint bytes)", a.0.len(), a.1.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let secs = Duration::from_secs;
    let criteria: Vec<(u32, &str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "parameter accounting", secs(1), Box::new(criterion_1)),
        (2, "ratio and position tables", secs(1), Box::new(criterion_2)),
        (3, "initialization identity", secs(30), Box::new(criterion_3)),
        (4, "freeze contract", secs(60), Box::new(criterion_4)),
        (5, "gradient correctness", secs(60), Box::new(criterion_5)),
        (6, "frame-permutation invariance", secs(60), Box::new(criterion_6)),
        (7, "toy ablation ladder", secs(600), Box::new(criterion_7)),
        (8, "order-sensitivity probe", secs(600), Box::new(criterion_8)),
        (9, "checkpoint roundtrip", secs(30), Box::new({
            let p = dir.path().to_path_buf();
            move || criterion_9(&p)
        })),
        (10, "determinism", secs(300), Box::new({
            let p = dir.path().to_path_buf();
            move || criterion_10(&p)
        })),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > budget => Err(format!("{msg}; took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        match &outcome {
            Ok(msg) => println!("criterion {id:>2} PASS {name} ({:.1}s): {msg}", took.as_secs_f64()),
            Err(msg) => {
                println!("criterion {id:>2} FAIL {name} ({:.1}s): {msg}", took.as_secs_f64());
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
