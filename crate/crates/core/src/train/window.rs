use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Normalizer, TrainError};
use crate::demo::{DatasetManifest, EpisodeRecord, ObservationFrame};
use crate::detect::{conditioning_box, GraspBox};

/// A training sample: the history ending at frame `start` and the action
/// chunk beginning there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

impl Window {
    /// Frame indices `[start - history + 1, start]`, clamped at 0.
    pub fn history(&self, history: usize) -> Vec<usize> {
        (0..history).map(|i| (self.start + i + 1).saturating_sub(history)).collect()
    }

    /// Action indices `[start, start + horizon)`, repeating the last action
    /// past the end of the episode.
    pub fn action_indices(&self, horizon: usize, episode_len: usize) -> Vec<usize> {
        (0..horizon).map(|i| (self.start + i).min(episode_len - 1)).collect()
    }
}

/// One window per frame of every episode, stride 1.
pub fn make_windows(records: &[EpisodeRecord]) -> Result<Vec<Window>, TrainError> {
    if records.iter().all(|r| r.is_empty()) {
        return Err(TrainError::Data("no episodes with frames".into()));
    }
    Ok(records
        .iter()
        .enumerate()
        .flat_map(|(episode, r)| (0..r.len()).map(move |start| Window { episode, start }))
        .collect())
}

/// Policy input for one decision: the history frames and their
/// conditioning boxes, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyObs<'a> {
    pub frames: Vec<&'a ObservationFrame>,
    pub boxes: Vec<Option<GraspBox>>,
}

/// Episodes held in memory with their normalized actions and per-frame
/// conditioning boxes.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub records: Vec<EpisodeRecord>,
    pub windows: Vec<Window>,
    pub normalizer: Normalizer,
    actions: Vec<Vec<[f64; 4]>>,
    conditioning: Vec<Vec<Option<GraspBox>>>,
}

impl TrainingSet {
    pub fn new(records: Vec<EpisodeRecord>) -> Result<Self, TrainError> {
        for r in &records {
            if r.actions.len() != r.frames.len() {
                return Err(TrainError::Data(format!(
                    "episode {} has {} frames but {} actions",
                    r.episode_id,
                    r.frames.len(),
                    r.actions.len()
                )));
            }
        }
        let windows = make_windows(&records)?;
        let normalizer = Normalizer::fit(&records)?;
        let actions = records
            .iter()
            .map(|r| r.actions.iter().map(|a| normalizer.norm_action(a.to_array())).collect())
            .collect();
        let conditioning = records
            .iter()
            .map(|r| r.frames.iter().map(|f| conditioning_box(&r.task, &f.boxes)).collect())
            .collect();
        Ok(Self {
            records,
            windows,
            normalizer,
            actions,
            conditioning,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let manifest = DatasetManifest::load(dir)?;
        if manifest.episodes.is_empty() {
            return Err(TrainError::Data(format!("manifest in {} lists no episodes", dir.display())));
        }
        Self::new(manifest.load_episodes(dir)?)
    }

    pub fn obs(&self, w: &Window, history: usize) -> PolicyObs<'_> {
        let idx = w.history(history);
        PolicyObs {
            frames: idx.iter().map(|&i| &self.records[w.episode].frames[i]).collect(),
            boxes: idx.iter().map(|&i| self.conditioning[w.episode][i]).collect(),
        }
    }

    /// Normalized action chunk, flat `horizon * 4`.
    pub fn target(&self, w: &Window, horizon: usize) -> Vec<f64> {
        let acts = &self.actions[w.episode];
        w.action_indices(horizon, acts.len()).iter().flat_map(|&i| acts[i]).collect()
    }

    /// Replaces every stored box (frames and prompts) by nothing.
    pub fn without_boxes(mut self) -> Self {
        for r in &mut self.records {
            r.task.prompt_box = None;
            for f in &mut r.frames {
                f.boxes.clear();
            }
        }
        for c in self.conditioning.iter_mut().flatten() {
            *c = None;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_frame_episode_windows_by_hand() {
        let w = |start| Window { episode: 0, start };
        assert_eq!(w(0).history(2), vec![0, 0]);
        assert_eq!(w(1).history(2), vec![0, 1]);
        assert_eq!(w(19).history(2), vec![18, 19]);
        assert_eq!(w(0).action_indices(16, 20), (0..16).collect::<Vec<_>>());
        assert_eq!(w(4).action_indices(16, 20), (4..20).collect::<Vec<_>>());
        let mut tail: Vec<usize> = (10..20).collect();
        tail.extend([19; 6]);
        assert_eq!(w(10).action_indices(16, 20), tail);
        assert_eq!(w(19).action_indices(16, 20), vec![19; 16]);
    }
}
