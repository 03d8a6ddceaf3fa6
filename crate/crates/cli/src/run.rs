use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use graspbox_core::demo::{build_fewshot_split, generate_dataset, DatasetManifest, DemoConfig};
use graspbox_core::detect::{sample_labeled_frames, train_detector, DetectorConfig, DetectorModel};
use graspbox_core::eval::{
    emit_report, evaluate_arm, family_tasks, run_ablation, write_report, Arm, DetectorSource, Job, ReportFormat, ReportRow,
    RolloutConfig, RolloutSettings, SeedResult, TableContext,
};
use graspbox_core::sim::{Catalog, ItemId, Simulator, TaskFamily};
use graspbox_core::train::{train_policy, Policy, TrainConfig, TrainingSet, FINAL_CHECKPOINT};
use serde::{Deserialize, Serialize};

use crate::{EvalArgs, SimArgs};

/// File name of the seed manifest every evaluation writes next to its reports.
pub const SEED_MANIFEST: &str = "seeds.json";

/// Everything needed to re-run an evaluation bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub catalog: Catalog,
    pub rollout: RolloutConfig,
    pub arms: Vec<ArmEntry>,
    pub detector: Option<PathBuf>,
    pub batch: usize,
    /// Held-out item and its demo count for few-shot runs.
    pub demos: BTreeMap<ItemId, usize>,
    /// The expanded `(task, seed)` grid.
    pub grid: Vec<Job>,
    pub results: Vec<SeedResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmEntry {
    pub name: String,
    pub policies: Vec<PathBuf>,
}

fn simulator(args: &SimArgs, default_size: Option<usize>) -> Result<Simulator> {
    let catalog = match &args.catalog {
        Some(p) => Catalog::load(p).with_context(|| format!("loading catalog {}", p.display()))?,
        None => Catalog::default(),
    };
    Ok(Simulator::new(match args.image_size.or(default_size) {
        Some(px) => catalog.with_image_size(px, px),
        None => catalog,
    }))
}

fn family(s: &str) -> Result<TaskFamily> {
    Ok(s.parse()?)
}

pub fn demo_gen(
    family_name: &str,
    counts: Option<usize>,
    divisor: usize,
    seed: u64,
    max_steps: usize,
    out: &Path,
    sim_args: &SimArgs,
) -> Result<()> {
    let sim = simulator(sim_args, None)?;
    let mut cfg = DemoConfig::protocol(&sim, family(family_name)?, seed);
    if let Some(n) = counts {
        for c in &mut cfg.conditions {
            c.count = n;
        }
    }
    cfg.count_divisor = divisor;
    cfg.max_steps = max_steps;
    log::info!("generating {} episodes into {}", cfg.total(), out.display());
    let manifest = generate_dataset(&sim, &cfg, out)?;
    for ((p, item), n) in manifest.counts() {
        println!("placement {p} target {item}: {n}");
    }
    println!("{} episodes written to {}", manifest.episodes.len(), out.display());
    Ok(())
}

pub fn fewshot_split(data: &Path, heldout: u32, k: usize, out: &Path) -> Result<DatasetManifest> {
    let base = DatasetManifest::load(data)?;
    let split = build_fewshot_split(&base, ItemId(heldout), k)?;
    fs::create_dir_all(out)?;
    for e in &split.episodes {
        let dst = out.join(&e.file);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(data.join(&e.file), &dst).with_context(|| format!("copying {}", e.file))?;
    }
    if let Some(norm) = &split.normalization {
        if data.join(norm).exists() {
            fs::copy(data.join(norm), out.join(norm))?;
        }
    }
    split.save(out)?;
    println!(
        "{} episodes ({} of item {heldout}) written to {}",
        split.episodes.len(),
        split.count_for_item(ItemId(heldout)),
        out.display()
    );
    Ok(split)
}

pub fn detector_train(out: &Path, frames: usize, steps: Option<usize>, seed: u64, sim_args: &SimArgs) -> Result<()> {
    let sim = simulator(sim_args, None)?;
    let data = sample_labeled_frames(&sim, frames, seed)?;
    let mut cfg = DetectorConfig {
        image_size: sim.catalog().camera.width,
        categories: sim.catalog().category_count(),
        seed,
        ..Default::default()
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    log::info!("training detector on {frames} frames for {} steps", cfg.steps);
    let model = train_detector(&data, cfg)?;
    for w in &model.meta.warnings {
        log::warn!("{w}");
    }
    model.save(out)?;
    println!("final loss {:.5}; saved {}", model.meta.final_loss, out.display());
    Ok(())
}

pub fn detector_eval(model: &Path, frames: usize, seed: u64, sim_args: &SimArgs) -> Result<()> {
    let model = DetectorModel::load(model)?;
    let sim = simulator(sim_args, Some(model.config.image_size))?;
    let test = sample_labeled_frames(&sim, frames, seed)?;
    let report = model.evaluate(&test)?;
    for (cat, ap) in &report.per_category {
        println!("category {cat}: AP {ap:.4}");
    }
    println!("mAP@{} = {:.4} over {frames} frames", report.iou_threshold, report.map);
    Ok(())
}

pub fn autolabel(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = DetectorModel::load(model)?;
    let manifest = DatasetManifest::load(data)?;
    let labeled = graspbox_core::detect::autolabel(&model, &manifest, data, out)?;
    println!("relabeled {} episodes into {}", labeled.episodes.len(), out.display());
    Ok(())
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(cfg)
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    cfg.output_dir = Some(dir.clone());
    let data = TrainingSet::load(&cfg.dataset)?;
    log::info!("{} windows from {}", data.windows.len(), cfg.dataset.display());
    let outcome = train_policy(&cfg, &data)?;
    fs::write(dir.join("train_config.toml"), toml::to_string(&cfg)?)?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
    println!(
        "trained {} steps; mean loss of the last {} steps {:.5}; checkpoint {}",
        cfg.steps,
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load_policies(paths: &[PathBuf]) -> Result<Vec<Policy>> {
    paths
        .iter()
        .map(|p| Policy::load(p).with_context(|| format!("loading policy {}", p.display())))
        .collect()
}

fn rollout_config(sim: &Simulator, args: &EvalArgs) -> Result<(RolloutConfig, Option<DetectorModel>)> {
    let source: DetectorSource = serde_json::from_value(serde_json::Value::String(args.source.clone()))
        .map_err(|_| anyhow!("unknown detector source `{}` (oracle, trained, prompt)", args.source))?;
    let detector = match (&args.detector, source) {
        (Some(p), _) => Some(DetectorModel::load(p)?),
        (None, DetectorSource::Trained) => bail!("--source trained needs --detector"),
        (None, _) => None,
    };
    let targets: Option<Vec<ItemId>> = args.targets.as_ref().map(|t| t.iter().map(|&i| ItemId(i)).collect());
    let tasks = family_tasks(
        sim,
        family(&args.family)?,
        args.placements.as_deref(),
        targets.as_deref(),
        source == DetectorSource::Prompt,
    )?;
    let cfg = RolloutConfig {
        tasks,
        episodes_per_condition: args.episodes,
        settings: RolloutSettings {
            max_steps: args.max_steps,
            k: args.k,
            source,
            ..Default::default()
        },
        seed: args.seed,
    };
    Ok((cfg, detector))
}

fn write_outputs(out: &Path, rows: &[ReportRow], manifest: &RunManifest, format: ReportFormat) -> Result<()> {
    fs::create_dir_all(out)?;
    write_report(rows, ReportFormat::Text, &out.join("report.txt"))?;
    write_report(rows, ReportFormat::Csv, &out.join("report.csv"))?;
    write_report(rows, ReportFormat::Plot, &out.join("plot.tsv"))?;
    fs::write(out.join(SEED_MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    print!("{}", emit_report(rows, format));
    Ok(())
}

fn dataset_demos(policies: &[Policy]) -> BTreeMap<ItemId, usize> {
    let Some(dir) = policies.first().and_then(|p| p.train_config.as_ref()).map(|c| c.dataset.clone()) else {
        return BTreeMap::new();
    };
    match DatasetManifest::load(&dir) {
        Ok(m) => {
            let mut out = BTreeMap::new();
            for e in &m.episodes {
                *out.entry(e.target_item).or_insert(0) += 1;
            }
            out
        }
        Err(_) => BTreeMap::new(),
    }
}

pub fn eval(name: &str, paths: &[PathBuf], args: &EvalArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let policies = load_policies(paths)?;
    let px = policies[0].config.encoder.image_width;
    let sim = simulator(&args.sim, Some(px))?;
    let (cfg, detector) = rollout_config(&sim, args)?;
    let ctx = TableContext {
        demos: dataset_demos(&policies),
    };
    let arm = Arm {
        name: name.to_string(),
        policies: policies.iter().collect(),
        config: cfg.clone(),
    };
    let result = evaluate_arm(&sim, &arm, detector.as_ref(), &ctx, args.batch)?;
    let rows = result.rows;
    let cfg_grid = cfg.grid();
    let manifest = RunManifest {
        command: "eval".into(),
        catalog: sim.catalog().clone(),
        rollout: cfg,
        arms: vec![ArmEntry {
            name: name.to_string(),
            policies: paths.to_vec(),
        }],
        detector: args.detector.clone(),
        batch: args.batch,
        demos: ctx.demos,
        grid: cfg_grid,
        results: result.per_seed,
    };
    write_outputs(&args.out, &rows, &manifest, format)
}

pub fn ablate(first: (&str, &[PathBuf]), second: (&str, &[PathBuf]), args: &EvalArgs, command: &str) -> Result<()> {
    ablate_with(first, second, args, command, BTreeMap::new())
}

fn ablate_with(
    first: (&str, &[PathBuf]),
    second: (&str, &[PathBuf]),
    args: &EvalArgs,
    command: &str,
    demos: BTreeMap<ItemId, usize>,
) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let a = load_policies(first.1)?;
    let b = load_policies(second.1)?;
    let px = a[0].config.encoder.image_width;
    let sim = simulator(&args.sim, Some(px))?;
    let (cfg, detector) = rollout_config(&sim, args)?;
    let ctx = TableContext {
        demos: if demos.is_empty() { dataset_demos(&a) } else { demos },
    };
    let arm_a = Arm {
        name: first.0.to_string(),
        policies: a.iter().collect(),
        config: cfg.clone(),
    };
    let arm_b = Arm {
        name: second.0.to_string(),
        policies: b.iter().collect(),
        config: cfg.clone(),
    };
    let report = run_ablation(&sim, &arm_a, &arm_b, detector.as_ref(), &ctx, args.batch)?;
    println!("TSR delta ({} - {}): {:+.2} pts", second.0, first.0, report.tsr_delta);
    match report.gsr_delta {
        Some(d) => println!("GSR delta ({} - {}): {d:+.2} pts", second.0, first.0),
        None => println!("GSR delta: n/a"),
    }
    let manifest = RunManifest {
        command: command.into(),
        catalog: sim.catalog().clone(),
        rollout: cfg,
        arms: vec![
            ArmEntry {
                name: first.0.to_string(),
                policies: first.1.to_vec(),
            },
            ArmEntry {
                name: second.0.to_string(),
                policies: second.1.to_vec(),
            },
        ],
        detector: args.detector.clone(),
        batch: args.batch,
        demos: ctx.demos,
        grid: report.grid,
        results: report.per_seed,
    };
    write_outputs(&args.out, &report.rows, &manifest, format)
}

pub fn fewshot(data: &Path, heldout: u32, k: usize, config: &Path, seeds: u64, args: &EvalArgs) -> Result<()> {
    let split_dir = args.out.join("data");
    let split = fewshot_split(data, heldout, k, &split_dir)?;
    let base = load_train_config(config)?;
    let set = TrainingSet::load(&split_dir)?;
    let mut paths: [Vec<PathBuf>; 2] = [Vec::new(), Vec::new()];
    for (arm, boxed) in [(0, false), (1, true)] {
        for s in 0..seeds {
            let dir = args.out.join(format!("{}_s{s}", if boxed { "box" } else { "dp" }));
            let ckpt = dir.join(FINAL_CHECKPOINT);
            if !ckpt.exists() {
                let cfg = TrainConfig {
                    seed: base.seed + s,
                    box_conditioning_enabled: boxed,
                    dataset: split_dir.clone(),
                    output_dir: Some(dir),
                    ..base.clone()
                };
                log::info!("training {} seed {s}", if boxed { "box-conditioned" } else { "DP" });
                train_policy(&cfg, &set)?;
            }
            paths[arm].push(ckpt);
        }
    }
    let mut eval_args = args.clone();
    eval_args.targets = Some(vec![heldout]);
    let mut demos = BTreeMap::new();
    demos.insert(ItemId(heldout), split.count_for_item(ItemId(heldout)));
    ablate_with(("DP", &paths[0]), ("BoxConditioned", &paths[1]), &eval_args, "fewshot", demos)
}

pub fn replay(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: RunManifest = serde_json::from_str(&text)?;
    let sim = Simulator::new(m.catalog.clone());
    let detector = m.detector.as_deref().map(DetectorModel::load).transpose()?;
    if m.rollout.grid() != m.grid {
        bail!("stored grid does not match the one its rollout config expands to");
    }
    let mut mismatches = 0;
    let mut results = m.results.iter();
    for arm in &m.arms {
        for (i, p) in load_policies(&arm.policies)?.iter().enumerate() {
            let recs = graspbox_core::eval::evaluate(&sim, p, &m.rollout, detector.as_ref(), m.batch)?;
            let metrics = graspbox_core::eval::compute_metrics(&recs);
            let stored = results.next().ok_or_else(|| anyhow!("manifest has fewer results than policies"))?;
            let same = stored.metrics == metrics;
            mismatches += usize::from(!same);
            println!(
                "{} seed {i}: TSR {:.4} GSR {} {}",
                arm.name,
                metrics.tsr(),
                metrics.gsr().map_or("n/a".into(), |g| format!("{g:.4}")),
                if same { "matches" } else { "DIFFERS" }
            );
        }
    }
    if mismatches > 0 {
        bail!("{mismatches} replayed result(s) differ from the manifest");
    }
    Ok(())
}

pub fn serve(
    specs: &[String],
    detector: Option<&Path>,
    addr: SocketAddr,
    max_steps: usize,
    k: usize,
    frame_delay_ms: u64,
    sim_args: &SimArgs,
) -> Result<()> {
    let mut policies = BTreeMap::new();
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone());
                (stem, p)
            }
        };
        let policy = Policy::load(&path).with_context(|| format!("loading policy {}", path.display()))?;
        policies.insert(name, Arc::new(policy));
    }
    // Scenes render at catalog size; policies downsample to their own input size.
    let sim = simulator(sim_args, None)?;
    let detector = detector.map(DetectorModel::load).transpose()?.map(Arc::new);
    let state = graspbox_promptd::AppState::new(
        sim,
        policies,
        detector,
        graspbox_promptd::ServiceConfig {
            max_steps,
            k,
            frame_delay: Duration::from_millis(frame_delay_ms),
        },
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(graspbox_promptd::serve(state, addr))?;
    Ok(())
}
