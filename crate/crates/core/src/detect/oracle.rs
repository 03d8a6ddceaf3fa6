use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DetectError, GraspBox};
use crate::demo::ObservationFrame;

/// Noise model applied to ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Per-axis standard deviation of the center jitter, pixels.
    pub center_sigma: f64,
    /// Per-axis standard deviation of the size jitter, pixels.
    pub size_sigma: f64,
    pub dropout_prob: f64,
    /// Confidence is `exp(-(|d_center| + |d_size|) / tau)`.
    pub tau: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            center_sigma: 0.0,
            size_sigma: 0.0,
            dropout_prob: 0.0,
            tau: 8.0,
        }
    }
}

impl Corruption {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.center_sigma) || !ok(self.size_sigma) {
            return Err(DetectError::Config("sigmas must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(DetectError::Config("dropout_prob must lie in [0, 1]".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(DetectError::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Corrupted copy of the frame's ground-truth boxes, deterministic in `seed`.
pub fn oracle_detect(frame: &ObservationFrame, c: &Corruption, seed: u64) -> Result<Vec<GraspBox>, DetectError> {
    c.validate()?;
    let dims = frame.views.first().map(|v| (v.width, v.height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, c.center_sigma).expect("validated sigma");
    let size = Normal::new(0.0, c.size_sigma).expect("validated sigma");
    let mut out = Vec::with_capacity(frame.boxes.len());
    for gt in &frame.boxes {
        if c.dropout_prob > 0.0 && rng.random::<f64>() < c.dropout_prob {
            continue;
        }
        let (dx, dy) = (center.sample(&mut rng), center.sample(&mut rng));
        let (dw, dh) = (size.sample(&mut rng), size.sample(&mut rng));
        let jitter = (dx * dx + dy * dy).sqrt() + (dw * dw + dh * dh).sqrt();
        let b = GraspBox {
            category: gt.category,
            cx: gt.cx + dx,
            cy: gt.cy + dy,
            w: gt.w + dw,
            h: gt.h + dh,
            confidence: (-jitter / c.tau).exp(),
        };
        out.push(match dims {
            Some((w, h)) => b.clamped(w, h),
            None => b,
        });
    }
    Ok(out)
}
