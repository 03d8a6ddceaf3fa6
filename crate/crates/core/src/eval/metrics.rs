use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::demo::EpisodeRecord;
use crate::sim::{ItemId, TaskFamily};

/// Raw episode and grasp counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: u64,
    pub task_successes: u64,
    pub grasp_attempts: u64,
    pub grasp_successes: u64,
}

impl Counts {
    pub fn add(&mut self, r: &EpisodeRecord) {
        self.episodes += 1;
        self.task_successes += r.outcome.task_success as u64;
        self.grasp_attempts += r.outcome.grasp_attempts as u64;
        self.grasp_successes += r.outcome.grasp_successes as u64;
    }

    pub fn merge(&mut self, o: &Counts) {
        self.episodes += o.episodes;
        self.task_successes += o.task_successes;
        self.grasp_attempts += o.grasp_attempts;
        self.grasp_successes += o.grasp_successes;
    }

    /// Task successes over episodes; 0 for no episodes.
    pub fn tsr(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.task_successes as f64 / self.episodes as f64
        }
    }

    /// Target grasp successes over attempts; undefined without attempts.
    pub fn gsr(&self) -> Option<f64> {
        (self.grasp_attempts > 0).then(|| self.grasp_successes as f64 / self.grasp_attempts as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionKey {
    pub family: TaskFamily,
    pub placement_id: u32,
    pub target_item: ItemId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_condition: Vec<(ConditionKey, Counts)>,
    pub total: Counts,
    /// Conditions with no grasp attempts, whose GSR is undefined and which
    /// therefore add nothing to the aggregate GSR.
    pub gsr_undefined: Vec<ConditionKey>,
}

impl MetricsReport {
    pub fn tsr(&self) -> f64 {
        self.total.tsr()
    }

    pub fn gsr(&self) -> Option<f64> {
        self.total.gsr()
    }

    /// Totals restricted to one target item.
    pub fn for_target(&self, item: ItemId) -> Counts {
        let mut c = Counts::default();
        for (k, v) in &self.per_condition {
            if k.target_item == item {
                c.merge(v);
            }
        }
        c
    }
}

/// Exact success ratios per `(family, placement, target)` and overall.
pub fn compute_metrics(records: &[EpisodeRecord]) -> MetricsReport {
    let mut by: BTreeMap<ConditionKey, Counts> = BTreeMap::new();
    let mut total = Counts::default();
    for r in records {
        let key = ConditionKey {
            family: r.task.family,
            placement_id: r.task.placement_id,
            target_item: r.task.target_item,
        };
        by.entry(key).or_default().add(r);
        total.add(r);
    }
    let gsr_undefined = by.iter().filter(|(_, c)| c.grasp_attempts == 0).map(|(k, _)| *k).collect();
    MetricsReport {
        per_condition: by.into_iter().collect(),
        total,
        gsr_undefined,
    }
}
