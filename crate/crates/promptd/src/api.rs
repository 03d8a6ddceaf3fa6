//! Request and response bodies. `API.md` shows each one with an example.

use std::io::Cursor;

use base64::Engine;
use graspbox_core::demo::{EpisodeOutcome, EpisodeRecord, ObservationFrame};
use graspbox_core::detect::GraspBox;
use graspbox_core::eval::Counts;
use graspbox_core::sim::{Image, ItemId, SimEvent, TaskSpec, WorldState};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    /// `PickBig`, `PickCup` or `PickGoods` (case and separators ignored).
    pub family: String,
    #[serde(default)]
    pub placement_id: u32,
    #[serde(default)]
    pub target_item: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    /// Name of a loaded checkpoint; optional when exactly one is loaded.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub checkpoint: String,
}

/// A lossless image: base64 PNG with its declared size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub view_id: usize,
    pub width: usize,
    pub height: usize,
    pub encoding: String,
    pub data: String,
}

impl EncodedImage {
    pub fn png(view_id: usize, img: &Image) -> Self {
        let mut buf = Cursor::new(Vec::new());
        image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(&img.data, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
            .expect("in-memory PNG encoding");
        Self {
            view_id,
            width: img.width,
            height: img.height,
            encoding: "png".into(),
            data: base64::engine::general_purpose::STANDARD.encode(buf.into_inner()),
        }
    }

    /// Decodes back to raw RGB8.
    pub fn decode(&self) -> Option<Image> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(&self.data).ok()?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).ok()?.to_rgb8();
        Some(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemView {
    pub id: ItemId,
    pub name: String,
    pub category: u32,
    pub pose: [f64; 2],
    pub graspable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GripperView {
    pub position: [f64; 3],
    pub width: f64,
    pub holding: Option<ItemId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub session_id: String,
    pub task: TaskSpec,
    pub views: Vec<EncodedImage>,
    /// View-0 boxes for overlay.
    pub boxes: Vec<GraspBox>,
    /// `detector` or `ground_truth`.
    pub box_source: String,
    pub items: Vec<ItemView>,
    pub gripper: GripperView,
    pub step: u64,
}

impl Scene {
    pub fn items(state: &WorldState) -> Vec<ItemView> {
        state
            .items
            .iter()
            .map(|i| ItemView {
                id: i.spec.id,
                name: i.spec.name.clone(),
                category: i.spec.category,
                pose: i.pose,
                graspable: i.spec.graspable,
            })
            .collect()
    }
}

/// A prompt box in view-0 pixels. Category 0 means geometry only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptBody {
    #[serde(default)]
    pub category: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl From<PromptBody> for GraspBox {
    fn from(p: PromptBody) -> Self {
        GraspBox {
            category: p.category,
            cx: p.cx,
            cy: p.cy,
            w: p.w,
            h: p.h,
            confidence: p.confidence,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptAck {
    pub accepted: bool,
    pub prompt: GraspBox,
    pub history_len: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StartRollout {
    /// Episode seed; the session seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutStarted {
    pub rollout_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameView {
    pub index: usize,
    pub timestep: u32,
    pub eef_pose: [f64; 3],
    pub gripper_width: f64,
    pub conditioning: Option<GraspBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<EncodedImage>,
}

impl FrameView {
    pub fn new(index: usize, f: &ObservationFrame, conditioning: Option<GraspBox>, images: bool) -> Self {
        Self {
            index,
            timestep: f.timestep,
            eef_pose: f.eef_pose,
            gripper_width: f.gripper_width,
            conditioning,
            views: if images {
                f.views.iter().enumerate().map(|(i, v)| EncodedImage::png(i, v)).collect()
            } else {
                Vec::new()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub task_success: bool,
    pub grasp_attempts: u32,
    pub grasp_successes: u32,
    pub first_grasped: Option<ItemId>,
    pub first_grasped_name: Option<String>,
    pub steps: usize,
    pub events: Vec<SimEvent>,
}

impl OutcomeView {
    pub fn of(rec: &EpisodeRecord, name: impl Fn(ItemId) -> Option<String>) -> Self {
        let EpisodeOutcome {
            task_success,
            grasp_successes,
            grasp_attempts,
        } = rec.outcome;
        let first = rec.first_grasped();
        Self {
            task_success,
            grasp_attempts,
            grasp_successes,
            first_grasped: first,
            first_grasped_name: first.and_then(name),
            steps: rec.len(),
            events: rec.events.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutView {
    pub rollout_id: u64,
    pub status: RolloutStatus,
    pub seed: u64,
    pub prompt: GraspBox,
    /// Total frames produced so far.
    pub frame_count: usize,
    /// Frames from the `since` query parameter on.
    pub frames: Vec<FrameView>,
    pub outcome: Option<OutcomeView>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutQuery {
    #[serde(default)]
    pub since: usize,
    #[serde(default)]
    pub images: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRun {
    pub rollout_id: u64,
    pub outcome: Option<OutcomeView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub index: usize,
    pub prompt: GraspBox,
    pub rollouts: Vec<PromptRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tallies {
    pub counts: Counts,
    pub tsr: f64,
    pub gsr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub session_id: String,
    pub active_prompt: Option<GraspBox>,
    pub entries: Vec<HistoryEntry>,
    pub tallies: Tallies,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}
