//! Receding-horizon rollouts, success metrics, standardized ablations and
//! report emission.

mod metrics;
mod report;

pub use metrics::{compute_metrics, ConditionKey, Counts, MetricsReport};
pub use report::{emit_report, grasp_strategy, parse_delimited, write_report, ReportFormat, ReportRow};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::demo::{observe, EpisodeOutcome, EpisodeRecord, ObservationFrame};
use crate::detect::{oracle_detect, select_top, Corruption, DetectorModel, GraspBox};
use crate::sim::{ActionCommand, ItemId, Simulator, TaskSpec, WorldState};
use crate::train::{Policy, PolicyObs, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("policy and task are incompatible: {0}")]
    Incompatible(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("standardization guard: {0}")]
    Standardization(String),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("unknown report format `{0}`")]
    UnknownFormat(String),
    #[error("malformed report: {0}")]
    Format(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the conditioning box comes from at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSource {
    /// Corrupted ground truth, then the top-ranked box.
    Oracle,
    /// A trained detector on view 0, then the top-ranked box.
    Trained,
    /// The task's prompt box, verbatim; no detector runs.
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSettings {
    pub max_steps: usize,
    /// Actions executed from each predicted chunk before re-planning.
    pub k: usize,
    pub source: DetectorSource,
    pub corruption: Corruption,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            max_steps: 200,
            k: 8,
            source: DetectorSource::Oracle,
            corruption: Corruption::default(),
        }
    }
}

/// One `(task, seed)` cell of an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub task: TaskSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub tasks: Vec<TaskSpec>,
    pub episodes_per_condition: usize,
    pub settings: RolloutSettings,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            episodes_per_condition: 40,
            settings: RolloutSettings::default(),
            seed: 0,
        }
    }
}

impl RolloutConfig {
    /// The full `(task, seed)` grid, condition-major.
    pub fn grid(&self) -> Vec<Job> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(c, task)| {
                (0..self.episodes_per_condition).map(move |e| Job {
                    task: task.clone(),
                    seed: mix(mix(self.seed, c as u64), e as u64),
                })
            })
            .collect()
    }
}

/// Every `(placement, target)` condition of `family`, optionally restricted.
/// With `prompted`, each task carries its target's ground-truth box as the
/// prompt.
pub fn family_tasks(
    sim: &Simulator,
    family: crate::sim::TaskFamily,
    placements: Option<&[u32]>,
    targets: Option<&[ItemId]>,
    prompted: bool,
) -> Result<Vec<TaskSpec>, EvalError> {
    let all_p: Vec<u32> = (0..family.placement_count()).collect();
    let all_t = sim.candidate_targets(family);
    let mut out = Vec::new();
    for &t in targets.unwrap_or(&all_t) {
        for &p in placements.unwrap_or(&all_p) {
            let mut task = sim.task(family, p, Some(t))?;
            if prompted {
                task.prompt_box = Some(sim.prompt_box(&task, 0)?);
            }
            out.push(task);
        }
    }
    Ok(out)
}

/// SplitMix64-style combination of two values into a seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_compat(sim: &Simulator, policy: &Policy, settings: &RolloutSettings) -> Result<(), EvalError> {
    let cats = sim.catalog().category_count();
    if policy.categories() != cats {
        return Err(EvalError::Incompatible(format!(
            "policy expects {} categories, simulator has {cats}",
            policy.categories()
        )));
    }
    let ec = &policy.config.encoder;
    if sim.cameras().len() != ec.view_count {
        return Err(EvalError::Incompatible(format!(
            "policy expects {} views, simulator renders {}",
            ec.view_count,
            sim.cameras().len()
        )));
    }
    for cam in sim.cameras() {
        if cam.width % ec.image_width != 0 || cam.height % ec.image_height != 0 || cam.width / ec.image_width != cam.height / ec.image_height {
            return Err(EvalError::Incompatible(format!(
                "{}x{} renders cannot be reduced to the policy's {}x{}",
                cam.width, cam.height, ec.image_width, ec.image_height
            )));
        }
    }
    if !(1..=policy.horizon()).contains(&settings.k) {
        return Err(EvalError::Config(format!("k = {} outside [1, {}]", settings.k, policy.horizon())));
    }
    Ok(())
}

struct Live {
    job: usize,
    state: WorldState,
    frames: Vec<ObservationFrame>,
    actions: Vec<ActionCommand>,
    boxes: Vec<Option<GraspBox>>,
    plan: VecDeque<ActionCommand>,
    chunks: u64,
    done: bool,
}

fn conditioning(
    settings: &RolloutSettings,
    task: &TaskSpec,
    frame: &ObservationFrame,
    detector: Option<&DetectorModel>,
    seed: u64,
) -> Result<Option<GraspBox>, EvalError> {
    Ok(match settings.source {
        DetectorSource::Prompt => Some(
            task.prompt_box
                .ok_or_else(|| EvalError::Precondition("prompt mode needs a task prompt box".into()))?,
        ),
        DetectorSource::Oracle => select_top(&oracle_detect(frame, &settings.corruption, seed)?),
        DetectorSource::Trained => {
            let det = detector.ok_or_else(|| EvalError::Precondition("trained-detector mode needs a detector".into()))?;
            select_top(&det.detect(&frame.views[0])?)
        }
    })
}

/// Runs all jobs in lockstep, batching the policy calls of every episode
/// that needs a new chunk. Each episode's randomness depends only on its
/// own seed.
pub fn rollout_batch(
    sim: &Simulator,
    policy: &Policy,
    jobs: &[Job],
    settings: &RolloutSettings,
    detector: Option<&DetectorModel>,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    rollout_batch_observed(sim, policy, jobs, settings, detector, &mut |_, _, _| {})
}

/// [`rollout_batch`] that reports every observed frame, with its job index
/// and conditioning box, as soon as it exists.
pub fn rollout_batch_observed(
    sim: &Simulator,
    policy: &Policy,
    jobs: &[Job],
    settings: &RolloutSettings,
    detector: Option<&DetectorModel>,
    on_frame: &mut dyn FnMut(usize, &ObservationFrame, Option<GraspBox>),
) -> Result<Vec<EpisodeRecord>, EvalError> {
    check_compat(sim, policy, settings)?;
    let mut live = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        live.push(Live {
            job: i,
            state: sim.reset(&job.task, job.seed)?,
            frames: Vec::new(),
            actions: Vec::new(),
            boxes: Vec::new(),
            plan: VecDeque::new(),
            chunks: 0,
            done: false,
        });
    }
    let history = policy.history();
    for step in 0..settings.max_steps {
        if live.iter().all(|l| l.done) {
            break;
        }
        for l in live.iter_mut().filter(|l| !l.done) {
            let frame = observe(sim, &l.state);
            let job = &jobs[l.job];
            let b = conditioning(settings, &job.task, &frame, detector, mix(job.seed, step as u64))?;
            on_frame(l.job, &frame, b);
            l.frames.push(frame);
            l.boxes.push(b);
        }
        let needy: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done && live[i].plan.is_empty()).collect();
        if !needy.is_empty() {
            let obs: Vec<PolicyObs> = needy
                .iter()
                .map(|&i| {
                    let l = &live[i];
                    let n = l.frames.len();
                    let idx: Vec<usize> = (0..history).map(|h| (n + h).saturating_sub(history)).collect();
                    PolicyObs {
                        frames: idx.iter().map(|&j| &l.frames[j]).collect(),
                        boxes: idx.iter().map(|&j| l.boxes[j]).collect(),
                    }
                })
                .collect();
            let seeds: Vec<u64> = needy.iter().map(|&i| mix(jobs[live[i].job].seed ^ 0xC0_FFEE, live[i].chunks)).collect();
            let chunks = policy.predict(&obs, &seeds)?;
            for (&i, chunk) in needy.iter().zip(chunks) {
                live[i].plan.extend(chunk.into_iter().take(settings.k));
                live[i].chunks += 1;
            }
        }
        for l in live.iter_mut().filter(|l| !l.done) {
            let a = l.plan.pop_front().expect("plan refilled above");
            l.state = sim.step(&l.state, &a)?;
            l.actions.push(a);
            if sim.task_success(&l.state) {
                l.done = true;
            }
        }
    }
    Ok(live
        .into_iter()
        .map(|l| {
            let job = &jobs[l.job];
            EpisodeRecord {
                episode_id: l.job as u64,
                seed: job.seed,
                task: job.task.clone(),
                outcome: EpisodeOutcome::of(sim, &l.state),
                events: l.state.events.clone(),
                frames: l.frames,
                actions: l.actions,
                conditioning: l.boxes,
            }
        })
        .collect())
}

/// A single episode; identical to the corresponding entry of a batch of one.
pub fn rollout(
    sim: &Simulator,
    policy: &Policy,
    task: &TaskSpec,
    seed: u64,
    settings: &RolloutSettings,
    detector: Option<&DetectorModel>,
) -> Result<EpisodeRecord, EvalError> {
    let job = Job { task: task.clone(), seed };
    Ok(rollout_batch(sim, policy, &[job], settings, detector)?.remove(0))
}

/// Rollouts for every cell of `cfg`'s grid, in chunks of `batch` episodes.
pub fn evaluate(
    sim: &Simulator,
    policy: &Policy,
    cfg: &RolloutConfig,
    detector: Option<&DetectorModel>,
    batch: usize,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(grid.len());
    for part in grid.chunks(batch.max(1)) {
        let mut recs = rollout_batch(sim, policy, part, &cfg.settings, detector)?;
        for r in &mut recs {
            r.episode_id += out.len() as u64;
        }
        out.extend(recs);
    }
    Ok(out)
}

/// One model arm of an ablation: a name and its per-seed policies.
pub struct Arm<'a> {
    pub name: String,
    pub policies: Vec<&'a Policy>,
    pub config: RolloutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub arm: String,
    pub seed_index: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
    pub per_seed: Vec<SeedResult>,
    /// The shared `(task, seed)` grid, for replay.
    pub grid: Vec<Job>,
    /// Second arm minus first arm, mean over seeds, in percentage points.
    pub tsr_delta: f64,
    pub gsr_delta: Option<f64>,
}

/// Extra columns of the per-target table.
#[derive(Debug, Clone, Default)]
pub struct TableContext {
    /// Demonstration count per target item.
    pub demos: std::collections::BTreeMap<ItemId, usize>,
}

/// One arm's table rows, per-seed metrics and seed-mean rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub rows: Vec<ReportRow>,
    pub per_seed: Vec<SeedResult>,
    pub tsr: f64,
    pub gsr: Option<f64>,
}

/// Evaluates every policy of `arm` on its grid.
pub fn evaluate_arm(
    sim: &Simulator,
    arm: &Arm<'_>,
    detector: Option<&DetectorModel>,
    ctx: &TableContext,
    batch: usize,
) -> Result<ArmResult, EvalError> {
    if arm.policies.is_empty() {
        return Err(EvalError::Config(format!("arm `{}` has no policies", arm.name)));
    }
    let mut per_seed = Vec::new();
    let mut metrics = Vec::new();
    for (i, p) in arm.policies.iter().enumerate() {
        let recs = evaluate(sim, p, &arm.config, detector, batch)?;
        let m = compute_metrics(&recs);
        per_seed.push(SeedResult {
            arm: arm.name.clone(),
            seed_index: i,
            metrics: m.clone(),
        });
        metrics.push(m);
    }
    let (tsr, gsr) = report::mean_rates(&metrics);
    Ok(ArmResult {
        rows: report::arm_rows(sim, &arm.name, &metrics, ctx),
        per_seed,
        tsr,
        gsr,
    })
}

/// Evaluates both arms on the identical grid. Refuses to run when the two
/// configs produce different `(task, seed)` grids or settings.
pub fn run_ablation(
    sim: &Simulator,
    first: &Arm<'_>,
    second: &Arm<'_>,
    detector: Option<&DetectorModel>,
    ctx: &TableContext,
    batch: usize,
) -> Result<AblationReport, EvalError> {
    let grid = first.config.grid();
    if grid != second.config.grid() {
        return Err(EvalError::Standardization("the two arms have different (task, seed) grids".into()));
    }
    if first.config.settings != second.config.settings {
        return Err(EvalError::Standardization("the two arms use different rollout settings".into()));
    }
    if first.policies.is_empty() || second.policies.is_empty() {
        return Err(EvalError::Config("each arm needs at least one policy".into()));
    }
    let datasets = |arm: &Arm| -> Vec<Option<std::path::PathBuf>> {
        arm.policies.iter().map(|p| p.train_config.as_ref().map(|t| t.dataset.clone())).collect()
    };
    let all: Vec<_> = datasets(first).into_iter().chain(datasets(second)).flatten().collect();
    if all.windows(2).any(|w| w[0] != w[1]) {
        return Err(EvalError::Standardization("arms were trained on different datasets".into()));
    }

    let a = evaluate_arm(sim, first, detector, ctx, batch)?;
    let b = evaluate_arm(sim, second, detector, ctx, batch)?;
    let tsr_delta = 100.0 * (b.tsr - a.tsr);
    let gsr_delta = match (a.gsr, b.gsr) {
        (Some(x), Some(y)) => Some(100.0 * (y - x)),
        _ => None,
    };
    let rows = a.rows.into_iter().chain(b.rows).collect();
    let per_seed = a.per_seed.into_iter().chain(b.per_seed).collect();
    Ok(AblationReport {
        rows,
        per_seed,
        grid,
        tsr_delta,
        gsr_delta,
    })
}

/// Both arms on the held-out item only, tagging rows with its demo count.
pub fn run_fewshot(
    sim: &Simulator,
    first: &Arm<'_>,
    second: &Arm<'_>,
    heldout: ItemId,
    demos: usize,
    batch: usize,
) -> Result<AblationReport, EvalError> {
    for arm in [first, second] {
        if arm.config.tasks.iter().any(|t| t.target_item != heldout) {
            return Err(EvalError::Config(format!("few-shot evaluation must target {heldout} only")));
        }
    }
    let mut ctx = TableContext::default();
    ctx.demos.insert(heldout, demos);
    run_ablation(sim, first, second, None, &ctx, batch)
}
