use serde::{Deserialize, Serialize};

use super::{CameraConfig, SimError};

/// Orthographic view: `[u, v] = A·[x, y] + t + z·z_shift`.
///
/// View 0 looks straight down. Further views tilt about the x axis, which
/// foreshortens y and shifts elevated points (the gripper) up the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub view_id: usize,
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
    pub z_shift: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    /// Builds the configured views so that each covers `workspace`
    /// (`[x_min, x_max, y_min, y_max]`).
    pub fn views(cfg: &CameraConfig, workspace: [f64; 4]) -> Vec<CameraModel> {
        (0..cfg.views).map(|v| Self::view(cfg, workspace, v)).collect()
    }

    pub fn view(cfg: &CameraConfig, workspace: [f64; 4], view_id: usize) -> CameraModel {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let [x0, x1, y0, y1] = workspace;
        let sx = w / (x1 - x0);
        let sy = h / (y1 - y0);
        let (xc, yc) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let tilt = if view_id == 0 {
            0.0
        } else {
            (cfg.oblique_deg * view_id as f64).to_radians()
        };
        let (c, s) = (tilt.cos(), tilt.sin());
        CameraModel {
            view_id,
            a: [[sx, 0.0], [0.0, -sy * c]],
            t: [w / 2.0 - sx * xc, h / 2.0 + sy * c * yc],
            z_shift: [0.0, -sy * s],
            width: cfg.width,
            height: cfg.height,
        }
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.width == 0 || self.height == 0 {
            return Err(SimError::Config("camera image size must be positive".into()));
        }
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return Err(SimError::Config(format!("view {} is not invertible", self.view_id)));
        }
        Ok(())
    }

    /// Ground-plane point to pixel coordinates (continuous; pixel centers at +0.5).
    pub fn project(&self, x: f64, y: f64) -> [f64; 2] {
        self.project3(x, y, 0.0)
    }

    pub fn project3(&self, x: f64, y: f64, z: f64) -> [f64; 2] {
        [
            self.a[0][0] * x + self.a[0][1] * y + self.t[0] + self.z_shift[0] * z,
            self.a[1][0] * x + self.a[1][1] * y + self.t[1] + self.z_shift[1] * z,
        ]
    }

    /// Pixel to ground-plane point.
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 2] {
        let d = self.det();
        let (du, dv) = (u - self.t[0], v - self.t[1]);
        [
            (self.a[1][1] * du - self.a[0][1] * dv) / d,
            (-self.a[1][0] * du + self.a[0][0] * dv) / d,
        ]
    }

    /// Image-space extent of a world-space size.
    pub fn scale_extent(&self, w: f64, h: f64) -> [f64; 2] {
        [
            (self.a[0][0] * w).abs() + (self.a[0][1] * h).abs(),
            (self.a[1][0] * w).abs() + (self.a[1][1] * h).abs(),
        ]
    }
}
