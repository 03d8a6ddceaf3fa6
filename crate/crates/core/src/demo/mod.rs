//! Scripted demonstrations and the on-disk dataset format.

mod expert;
mod generate;
mod store;

use serde::{Deserialize, Serialize};

use crate::detect::GraspBox;
use crate::sim::{ActionCommand, Image, SimError, SimEvent, Simulator, TaskSpec, WorldState};

pub use expert::ScriptedExpert;
pub use generate::{
    build_fewshot_split, generate_dataset, generate_episodes, pick_cup_protocol, run_expert_episode, Condition,
    DemoConfig,
};
pub use store::{
    read_episode, write_dataset, write_episode, DatasetManifest, EpisodeEntry, FewShotInfo, LabelSource,
    FORMAT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("expert failure: {0}")]
    ExpertFailure(String),
    #[error("expert failed on {failed} of {total} episodes (limit 5%); first failure: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("few-shot split: {0}")]
    FewShot(String),
    #[error("invalid demo config: {0}")]
    Config(String),
}

/// What the robot sees at one timestep, before acting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub views: Vec<Image>,
    pub eef_pose: [f64; 3],
    pub gripper_width: f64,
    /// View-0 grasp boxes.
    pub boxes: Vec<GraspBox>,
    pub timestep: u32,
}

impl ObservationFrame {
    /// Low-dimensional proprioception `[x, y, z, width]`.
    pub fn lowdim(&self) -> [f64; 4] {
        let [x, y, z] = self.eef_pose;
        [x, y, z, self.gripper_width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task_success: bool,
    pub grasp_successes: u32,
    pub grasp_attempts: u32,
}

impl EpisodeOutcome {
    pub fn of(sim: &Simulator, state: &WorldState) -> Self {
        Self {
            task_success: sim.task_success(state),
            grasp_successes: state.target_grasps(),
            grasp_attempts: state.grasp_attempts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub seed: u64,
    pub task: TaskSpec,
    pub frames: Vec<ObservationFrame>,
    /// `actions[t]` was executed after observing `frames[t]`.
    pub actions: Vec<ActionCommand>,
    pub events: Vec<SimEvent>,
    pub outcome: EpisodeOutcome,
    /// Conditioning box used at each frame, when one was used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditioning: Vec<Option<GraspBox>>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The first item that was successfully grasped, if any.
    pub fn first_grasped(&self) -> Option<crate::sim::ItemId> {
        self.events.iter().find_map(|e| match e {
            SimEvent::Grasp { item: Some(i), .. } => Some(*i),
            _ => None,
        })
    }

    /// Re-executes the stored actions from `reset(task, seed)`.
    pub fn replay(&self, sim: &Simulator) -> Result<WorldState, SimError> {
        let mut state = sim.reset(&self.task, self.seed)?;
        for a in &self.actions {
            state = sim.step(&state, a)?;
        }
        Ok(state)
    }
}

/// Renders the observation for `state` with ground-truth view-0 boxes.
pub fn observe(sim: &Simulator, state: &WorldState) -> ObservationFrame {
    let g = &state.gripper;
    ObservationFrame {
        views: sim.render_views(state),
        eef_pose: g.position,
        gripper_width: g.width,
        boxes: sim.groundtruth_boxes(state, &sim.cameras()[0]),
        timestep: state.step_count as u32,
    }
}
