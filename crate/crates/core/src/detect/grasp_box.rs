use serde::{Deserialize, Serialize};

/// Axis-aligned graspable region in image pixel coordinates.
///
/// Category 0 is reserved for "unknown" (geometry-only prompts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspBox {
    pub category: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

/// A violated [`GraspBox`] invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid grasp box field `{field}`: {reason}")]
pub struct BoxFieldError {
    pub field: &'static str,
    pub reason: String,
}

impl GraspBox {
    /// Checks the invariants for an image of `width x height` pixels and
    /// `categories` classes.
    pub fn validate(&self, width: usize, height: usize, categories: usize) -> Result<(), BoxFieldError> {
        let bad = |field, reason: String| Err(BoxFieldError { field, reason });
        if !(self.cx.is_finite() && self.cx >= 0.0 && self.cx < width as f64) {
            return bad("cx", format!("{} outside [0, {width})", self.cx));
        }
        if !(self.cy.is_finite() && self.cy >= 0.0 && self.cy < height as f64) {
            return bad("cy", format!("{} outside [0, {height})", self.cy));
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return bad("w", format!("{} is not positive", self.w));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return bad("h", format!("{} is not positive", self.h));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad("confidence", format!("{} outside [0, 1]", self.confidence));
        }
        if self.category as usize >= categories {
            return bad("category", format!("{} >= category count {categories}", self.category));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection over union of two boxes.
    pub fn iou(&self, other: &GraspBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Shrinks/moves the box so that it satisfies the image-bounds invariants.
    pub fn clamped(mut self, width: usize, height: usize) -> GraspBox {
        let (wf, hf) = (width as f64, height as f64);
        self.confidence = self.confidence.clamp(0.0, 1.0);
        let inside = self.x0() >= 0.0 && self.x1() <= wf && self.y0() >= 0.0 && self.y1() <= hf;
        if inside && self.w > 0.0 && self.h > 0.0 && self.cx < wf && self.cy < hf {
            return self;
        }
        let x0 = self.x0().clamp(0.0, wf);
        let x1 = self.x1().clamp(0.0, wf);
        let y0 = self.y0().clamp(0.0, hf);
        let y1 = self.y1().clamp(0.0, hf);
        self.w = (x1 - x0).max(1e-3);
        self.h = (y1 - y0).max(1e-3);
        self.cx = ((x0 + x1) / 2.0).clamp(0.0, wf - 1e-6);
        self.cy = ((y0 + y1) / 2.0).clamp(0.0, hf - 1e-6);
        self
    }
}
