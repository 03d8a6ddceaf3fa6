//! Deterministic top-down pick-and-place simulator.
//!
//! State evolution is a pure function of `(state, action)`; grasping is a
//! kinematic attach/detach decided by [`Simulator::grasp_success_predicate`].

mod camera;
mod catalog;
mod render;
mod world;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detect::GraspBox;

pub use camera::CameraModel;
pub use catalog::{CameraConfig, Catalog, PickBigLayout, PickCupLayout, PickGoodsLayout, Tolerances};
pub use render::Image;
pub use world::Simulator;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("catalog error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "item#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Disc,
}

fn default_true() -> bool {
    true
}

/// Static description of a graspable (or distractor) object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: ItemId,
    pub name: String,
    pub category: u32,
    pub shape: Shape,
    /// Body (width, depth) in meters.
    pub extent: [f64; 2],
    /// `[offset_x, offset_y, g_width, g_height]` in the item frame.
    pub grasp_region: [f64; 4],
    /// Whether the item carries a grasp-box annotation.
    #[serde(default = "default_true")]
    pub graspable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<[f64; 4]>,
    pub color: [u8; 3],
}

impl ItemSpec {
    pub fn grasp_width(&self) -> f64 {
        self.grasp_region[2]
    }

    /// Bounding box of body and handle, item frame: `[x0, y0, x1, y1]`.
    pub fn footprint(&self) -> [f64; 4] {
        let [w, d] = self.extent;
        let mut fp = [-w / 2.0, -d / 2.0, w / 2.0, d / 2.0];
        if let Some([ox, oy, hw, hd]) = self.handle {
            fp[0] = fp[0].min(ox - hw / 2.0);
            fp[1] = fp[1].min(oy - hd / 2.0);
            fp[2] = fp[2].max(ox + hw / 2.0);
            fp[3] = fp[3].max(oy + hd / 2.0);
        }
        fp
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(format!("item {}: {m}", self.name)));
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return bad("extent must be positive".into());
        }
        let [ox, oy, gw, gh] = self.grasp_region;
        if !(gw > 0.0 && gh > 0.0) {
            return bad("grasp region must have positive size".into());
        }
        let fp = self.footprint();
        let (fw, fd) = (fp[2] - fp[0], fp[3] - fp[1]);
        let (cx, cy) = ((fp[0] + fp[2]) / 2.0, (fp[1] + fp[3]) / 2.0);
        let inflated = [cx - 0.6 * fw, cy - 0.6 * fd, cx + 0.6 * fw, cy + 0.6 * fd];
        let inside = ox - gw / 2.0 >= inflated[0] - 1e-12
            && oy - gh / 2.0 >= inflated[1] - 1e-12
            && ox + gw / 2.0 <= inflated[2] + 1e-12
            && oy + gh / 2.0 <= inflated[3] + 1e-12;
        if !inside {
            return bad("grasp region leaves the footprint inflated by 20%".into());
        }
        Ok(())
    }
}

/// Axis-aligned world rectangle, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect2 {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for Rect2 {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x0: v[0].min(v[2]),
            y0: v[1].min(v[3]),
            x1: v[0].max(v[2]),
            y1: v[1].max(v[3]),
        }
    }
}

impl From<Rect2> for [f64; 4] {
    fn from(r: Rect2) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

impl Rect2 {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    PickBig,
    PickCup,
    PickGoods,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::PickBig, TaskFamily::PickCup, TaskFamily::PickGoods];

    pub fn placement_count(self) -> u32 {
        match self {
            TaskFamily::PickBig => 8,
            TaskFamily::PickCup => 4,
            TaskFamily::PickGoods => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PickBig => "PickBig",
            TaskFamily::PickCup => "PickCup",
            TaskFamily::PickGoods => "PickGoods",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pickbig" => Ok(TaskFamily::PickBig),
            "pickcup" => Ok(TaskFamily::PickCup),
            "pickgoods" => Ok(TaskFamily::PickGoods),
            _ => Err(SimError::InvalidTask(format!("unknown family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub placement_id: u32,
    pub target_item: ItemId,
    pub target_zone: Rect2,
    /// View-0 grasp box that overrides detection when present.
    #[serde(default)]
    pub prompt_box: Option<GraspBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub position: [f64; 3],
    pub width: f64,
    /// Width target of the most recent command.
    pub commanded_width: f64,
    pub holding: Option<ItemId>,
    /// Item pose minus gripper xy, fixed at attach time.
    pub hold_offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedItem {
    pub spec: ItemSpec,
    pub pose: [f64; 2],
}

impl PlacedItem {
    /// World-frame grasp region as `(center, half_extents)`.
    pub fn grasp_region_world(&self) -> ([f64; 2], [f64; 2]) {
        let [ox, oy, gw, gh] = self.spec.grasp_region;
        ([self.pose[0] + ox, self.pose[1] + oy], [gw / 2.0, gh / 2.0])
    }
}

/// Absolute end-effector target: position in meters and jaw opening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub width: f64,
}

impl ActionCommand {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.width]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            width: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimEvent {
    /// A close event; `item` is the attached item on success.
    Grasp {
        step: u64,
        position: [f64; 3],
        commanded_width: f64,
        item: Option<ItemId>,
    },
    Release { step: u64, item: ItemId, pose: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub items: Vec<PlacedItem>,
    pub gripper: GripperState,
    pub task: TaskSpec,
    pub step_count: u64,
    pub rng_seed: u64,
    pub events: Vec<SimEvent>,
}

impl WorldState {
    pub fn item(&self, id: ItemId) -> Option<&PlacedItem> {
        self.items.iter().find(|i| i.spec.id == id)
    }

    pub fn target(&self) -> &PlacedItem {
        self.item(self.task.target_item)
            .expect("target item exists by construction")
    }

    pub fn grasp_attempts(&self) -> u32 {
        self.events
            .iter()
            .filter(|e| matches!(e, SimEvent::Grasp { .. }))
            .count() as u32
    }

    /// Successful grasps of the task target.
    pub fn target_grasps(&self) -> u32 {
        let target = self.task.target_item;
        self.events
            .iter()
            .filter(|e| matches!(e, SimEvent::Grasp { item: Some(i), .. } if *i == target))
            .count() as u32
    }

    pub fn first_grasped(&self) -> Option<ItemId> {
        self.events.iter().find_map(|e| match e {
            SimEvent::Grasp { item: Some(i), .. } => Some(*i),
            _ => None,
        })
    }
}
