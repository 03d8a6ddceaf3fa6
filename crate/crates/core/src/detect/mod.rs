//! Grasp-box detection: oracle and trainable detectors, selection, metrics.

mod grasp_box;
mod map;
mod model;
mod oracle;

pub use grasp_box::{BoxFieldError, GraspBox};
pub use map::{average_precision, evaluate_map, MapReport};
pub use model::{
    autolabel, autolabel_with, sample_labeled_frames, train_detector, DetectorConfig, DetectorMeta, DetectorModel, LabeledFrame,
};
pub use oracle::{oracle_detect, Corruption};

use std::cmp::Ordering;

use crate::sim::TaskSpec;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Blob(#[from] crate::blob::BlobError),
    #[error(transparent)]
    Demo(#[from] crate::demo::DemoError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// Ranking used by [`select_top`]: higher confidence first, then lower
/// category, smaller `cx`, smaller `cy`.
pub fn rank_order(a: &GraspBox, b: &GraspBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.category.cmp(&b.category))
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
}

/// The single highest-ranked box, if any.
pub fn select_top(boxes: &[GraspBox]) -> Option<GraspBox> {
    boxes.iter().min_by(|a, b| rank_order(a, b)).copied()
}

/// A task prompt overrides detection; otherwise the top detection.
pub fn conditioning_box(task: &TaskSpec, detections: &[GraspBox]) -> Option<GraspBox> {
    task.prompt_box.or_else(|| select_top(detections))
}
