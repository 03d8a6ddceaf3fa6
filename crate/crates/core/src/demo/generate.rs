use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::{episode_file_name, write_episode, DatasetManifest, EpisodeEntry, FewShotInfo, LabelSource};
use super::{observe, DemoError, EpisodeOutcome, EpisodeRecord, ScriptedExpert, FORMAT_VERSION};
use crate::sim::{ItemId, Simulator, TaskFamily, TaskSpec};

/// A `(placement, target)` cell and how many episodes to keep for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub placement_id: u32,
    pub target_item: ItemId,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub family: TaskFamily,
    pub conditions: Vec<Condition>,
    pub seed: u64,
    pub max_steps: usize,
    /// Per-condition counts are divided by this (rounded up, at least 1).
    pub count_divisor: usize,
    pub expert: ScriptedExpert,
}

impl DemoConfig {
    /// Default collection protocol for `family`.
    pub fn protocol(sim: &Simulator, family: TaskFamily, seed: u64) -> Self {
        let conditions = match family {
            TaskFamily::PickBig => {
                let target = sim.candidate_targets(family)[0];
                (0..8)
                    .map(|p| Condition {
                        placement_id: p,
                        target_item: target,
                        count: 75,
                    })
                    .collect()
            }
            TaskFamily::PickCup => pick_cup_protocol(sim),
            TaskFamily::PickGoods => sim
                .candidate_targets(family)
                .into_iter()
                .map(|t| Condition {
                    placement_id: 0,
                    target_item: t,
                    count: 100,
                })
                .collect(),
        };
        Self {
            family,
            conditions,
            seed,
            max_steps: 200,
            count_divisor: 1,
            expert: ScriptedExpert::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.conditions.iter().map(|c| self.scaled(c.count)).sum()
    }

    fn scaled(&self, count: usize) -> usize {
        count.div_ceil(self.count_divisor.max(1)).max(1)
    }
}

/// Three main cups at four placements with 25 demos each, then the two
/// few-shot cups: 5 demos at one placement and 10 split over two.
pub fn pick_cup_protocol(sim: &Simulator) -> Vec<Condition> {
    let cups = sim.candidate_targets(TaskFamily::PickCup);
    let mut out = Vec::new();
    for &cup in &cups[..3] {
        for p in 0..4 {
            out.push(Condition {
                placement_id: p,
                target_item: cup,
                count: 25,
            });
        }
    }
    if let Some(&mug) = cups.get(3) {
        out.push(Condition {
            placement_id: 0,
            target_item: mug,
            count: 5,
        });
    }
    if let Some(&cup) = cups.get(4) {
        for p in 0..2 {
            out.push(Condition {
                placement_id: p,
                target_item: cup,
                count: 5,
            });
        }
    }
    out
}

/// Runs the expert until task success or `max_steps`.
pub fn run_expert_episode(
    sim: &Simulator,
    task: &TaskSpec,
    seed: u64,
    max_steps: usize,
    expert: &ScriptedExpert,
) -> Result<EpisodeRecord, DemoError> {
    let mut state = sim.reset(task, seed)?;
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    while frames.len() < max_steps && !sim.task_success(&state) {
        let a = expert.act(sim, &state)?;
        frames.push(observe(sim, &state));
        actions.push(a);
        state = sim.step(&state, &a)?;
    }
    Ok(EpisodeRecord {
        episode_id: 0,
        seed,
        task: task.clone(),
        frames,
        actions,
        events: state.events.clone(),
        outcome: EpisodeOutcome::of(sim, &state),
        conditioning: Vec::new(),
    })
}

fn episode_seed(base: u64, attempt: u64) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(attempt)
}

/// Generates successful episodes per condition, calling `sink` on each.
fn for_each_episode(
    sim: &Simulator,
    cfg: &DemoConfig,
    mut sink: impl FnMut(EpisodeRecord) -> Result<(), DemoError>,
) -> Result<(), DemoError> {
    if cfg.conditions.is_empty() {
        return Err(DemoError::Config("no conditions".into()));
    }
    if cfg.conditions.iter().any(|c| c.count == 0) {
        return Err(DemoError::Config("condition counts must be >= 1".into()));
    }
    let total = cfg.total();
    let mut attempt = 0u64;
    let mut next_id = 0u64;
    let mut failures = 0usize;
    let mut first_failure = None;
    for c in &cfg.conditions {
        let mut task = sim.task(cfg.family, c.placement_id, Some(c.target_item))?;
        let want = cfg.scaled(c.count);
        let mut kept = 0;
        while kept < want {
            let seed = episode_seed(cfg.seed, attempt);
            attempt += 1;
            if cfg.family == TaskFamily::PickGoods {
                task.prompt_box = Some(sim.prompt_box(&task, seed)?);
            }
            let outcome = run_expert_episode(sim, &task, seed, cfg.max_steps, &cfg.expert);
            match outcome {
                Ok(mut rec) if rec.outcome.task_success => {
                    rec.episode_id = next_id;
                    next_id += 1;
                    kept += 1;
                    sink(rec)?;
                }
                other => {
                    failures += 1;
                    let why = match other {
                        Err(e) => e.to_string(),
                        Ok(_) => format!("no success within {} steps", cfg.max_steps),
                    };
                    log::warn!("expert failed on {} placement {} seed {seed}: {why}", cfg.family, c.placement_id);
                    first_failure.get_or_insert(why);
                    if failures as f64 > 0.05 * total as f64 {
                        return Err(DemoError::TooManyFailures {
                            failed: failures,
                            total: kept + failures,
                            first: first_failure.unwrap_or_default(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// In-memory variant of [`generate_dataset`].
pub fn generate_episodes(sim: &Simulator, cfg: &DemoConfig) -> Result<Vec<EpisodeRecord>, DemoError> {
    let mut out = Vec::with_capacity(cfg.total());
    for_each_episode(sim, cfg, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Generates the dataset into `dir`, keeping only successful episodes.
pub fn generate_dataset(sim: &Simulator, cfg: &DemoConfig, dir: &Path) -> Result<DatasetManifest, DemoError> {
    let mut entries = Vec::with_capacity(cfg.total());
    for_each_episode(sim, cfg, |rec| {
        let file = episode_file_name(rec.episode_id);
        write_episode(&dir.join(&file), &rec)?;
        entries.push(EpisodeEntry {
            episode_id: rec.episode_id,
            file,
            placement_id: rec.task.placement_id,
            target_item: rec.task.target_item,
            seed: rec.seed,
            frames: rec.frames.len(),
        });
        Ok(())
    })?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        family: cfg.family,
        seed: cfg.seed,
        labels: LabelSource::Oracle,
        episodes: entries,
        fewshot: None,
        normalization: None,
        catalog: sim.catalog().clone(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Base set without `heldout` plus its first `k` episodes (by id).
pub fn build_fewshot_split(manifest: &DatasetManifest, heldout: ItemId, k: usize) -> Result<DatasetManifest, DemoError> {
    if manifest.catalog.item(heldout).is_none() {
        return Err(DemoError::FewShot(format!("{heldout} is not in the catalog")));
    }
    let mut held: Vec<&EpisodeEntry> = manifest.episodes.iter().filter(|e| e.target_item == heldout).collect();
    if k > held.len() {
        return Err(DemoError::FewShot(format!(
            "k = {k} exceeds the {} available episodes of {heldout}",
            held.len()
        )));
    }
    held.sort_by_key(|e| e.episode_id);
    let keep: Vec<u64> = held[..k].iter().map(|e| e.episode_id).collect();
    let episodes = manifest
        .episodes
        .iter()
        .filter(|e| e.target_item != heldout || keep.contains(&e.episode_id))
        .cloned()
        .collect();
    Ok(DatasetManifest {
        episodes,
        fewshot: Some(FewShotInfo { heldout_item: heldout, k }),
        ..manifest.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sim() -> Simulator {
        Simulator::new(crate::sim::Catalog::default().with_image_size(24, 24))
    }

    #[test]
    fn expert_solves_pick_big_placement_zero() {
        let sim = small_sim();
        let task = sim.task(TaskFamily::PickBig, 0, None).unwrap();
        let rec = run_expert_episode(&sim, &task, 0, 200, &ScriptedExpert::default()).unwrap();
        assert!(rec.outcome.task_success);
        assert_eq!(rec.outcome.grasp_attempts, 1);
        assert_eq!(rec.frames.len(), rec.actions.len());
        let replay = rec.replay(&sim).unwrap();
        assert_eq!(EpisodeOutcome::of(&sim, &replay), rec.outcome);
        assert_eq!(replay.events, rec.events);
    }

    #[test]
    fn protocol_counts() {
        let sim = small_sim();
        assert_eq!(DemoConfig::protocol(&sim, TaskFamily::PickBig, 0).total(), 600);
        assert_eq!(DemoConfig::protocol(&sim, TaskFamily::PickCup, 0).total(), 315);
        assert_eq!(DemoConfig::protocol(&sim, TaskFamily::PickGoods, 0).total(), 400);
        let mut cfg = DemoConfig::protocol(&sim, TaskFamily::PickBig, 0);
        cfg.count_divisor = 10;
        assert_eq!(cfg.total(), 64);
    }

    #[test]
    fn single_condition_single_episode() {
        let sim = small_sim();
        let mut cfg = DemoConfig::protocol(&sim, TaskFamily::PickCup, 3);
        cfg.conditions.truncate(1);
        cfg.conditions[0].count = 1;
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&sim, &cfg, dir.path()).unwrap();
        assert_eq!(m.episodes.len(), 1);
        m.verify(dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn zero_count_rejected() {
        let sim = small_sim();
        let mut cfg = DemoConfig::protocol(&sim, TaskFamily::PickCup, 3);
        cfg.conditions[0].count = 0;
        assert!(matches!(generate_episodes(&sim, &cfg), Err(DemoError::Config(_))));
    }

    #[test]
    fn impossible_budget_aborts() {
        let sim = small_sim();
        let mut cfg = DemoConfig::protocol(&sim, TaskFamily::PickBig, 0);
        cfg.conditions.truncate(2);
        cfg.max_steps = 5;
        assert!(matches!(generate_episodes(&sim, &cfg), Err(DemoError::TooManyFailures { .. })));
    }

    fn fake_manifest() -> DatasetManifest {
        let mut episodes = Vec::new();
        let mut id = 0;
        for (item, n) in [(3, 4), (6, 7), (4, 2)] {
            for _ in 0..n {
                episodes.push(EpisodeEntry {
                    episode_id: id,
                    file: episode_file_name(id),
                    placement_id: 0,
                    target_item: ItemId(item),
                    seed: id,
                    frames: 10,
                });
                id += 1;
            }
        }
        DatasetManifest {
            format_version: FORMAT_VERSION,
            family: TaskFamily::PickCup,
            seed: 0,
            labels: LabelSource::Oracle,
            episodes,
            fewshot: None,
            normalization: None,
            catalog: crate::sim::Catalog::default(),
        }
    }

    #[test]
    fn fewshot_split_counts() {
        let m = fake_manifest();
        for (k, expect_total) in [(5, 11), (0, 6), (7, 13)] {
            let s = build_fewshot_split(&m, ItemId(6), k).unwrap();
            assert_eq!(s.count_for_item(ItemId(6)), k);
            assert_eq!(s.episodes.len(), expect_total);
            assert_eq!(s.fewshot, Some(FewShotInfo { heldout_item: ItemId(6), k }));
        }
        let s = build_fewshot_split(&m, ItemId(6), 2).unwrap();
        let ids: Vec<u64> = s.episodes.iter().filter(|e| e.target_item == ItemId(6)).map(|e| e.episode_id).collect();
        assert_eq!(ids, vec![4, 5]);
        assert!(matches!(build_fewshot_split(&m, ItemId(6), 8), Err(DemoError::FewShot(_))));
        assert!(matches!(build_fewshot_split(&m, ItemId(99), 0), Err(DemoError::FewShot(_))));
    }
}
