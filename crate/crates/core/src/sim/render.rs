use serde::{Deserialize, Serialize};

use super::{CameraModel, Shape, WorldState};

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub(crate) const BACKGROUND: [f32; 3] = [40.0, 40.0, 40.0];
const ZONE: [f32; 3] = [45.0, 75.0, 45.0];
const SUPERSAMPLE: usize = 4;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], coverage: f32) {
        let p = &mut self.px[y * self.w + x];
        for c in 0..3 {
            p[c] += (color[c] - p[c]) * coverage;
        }
    }

    /// Axis-aligned rectangle with exact area coverage.
    fn rect(&mut self, u0: f64, v0: f64, u1: f64, v1: f64, color: [f32; 3]) {
        let (u0, u1) = (u0.min(u1), u0.max(u1));
        let (v0, v1) = (v0.min(v1), v0.max(v1));
        let Some((i0, i1)) = pixel_span(u0, u1, self.w) else { return };
        let Some((j0, j1)) = pixel_span(v0, v1, self.h) else { return };
        for j in j0..j1 {
            let cy = overlap(j as f64, v0, v1);
            for i in i0..i1 {
                let c = overlap(i as f64, u0, u1) * cy;
                if c > 0.0 {
                    self.blend(i, j, color, c as f32);
                }
            }
        }
    }

    /// Axis-aligned ellipse, coverage by regular supersampling.
    fn ellipse(&mut self, uc: f64, vc: f64, ru: f64, rv: f64, color: [f32; 3]) {
        let Some((i0, i1)) = pixel_span(uc - ru, uc + ru, self.w) else { return };
        let Some((j0, j1)) = pixel_span(vc - rv, vc + rv, self.h) else { return };
        let n = SUPERSAMPLE;
        for j in j0..j1 {
            for i in i0..i1 {
                let mut hits = 0usize;
                for sj in 0..n {
                    let y = (j as f64 + (sj as f64 + 0.5) / n as f64 - vc) / rv;
                    for si in 0..n {
                        let x = (i as f64 + (si as f64 + 0.5) / n as f64 - uc) / ru;
                        if x * x + y * y <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    self.blend(i, j, color, hits as f32 / (n * n) as f32);
                }
            }
        }
    }
}

fn pixel_span(a: f64, b: f64, n: usize) -> Option<(usize, usize)> {
    let lo = a.floor().max(0.0);
    let hi = b.ceil().min(n as f64);
    (hi > lo).then_some((lo as usize, hi as usize))
}

fn overlap(p: f64, a: f64, b: f64) -> f64 {
    ((p + 1.0).min(b) - p.max(a)).max(0.0)
}

fn rgb(c: [u8; 3], gain: f32) -> [f32; 3] {
    [c[0] as f32 * gain, c[1] as f32 * gain, c[2] as f32 * gain]
}

pub(crate) fn render(state: &WorldState, cam: &CameraModel, z_max: f64) -> Image {
    let mut cv = Canvas {
        w: cam.width,
        h: cam.height,
        px: vec![BACKGROUND; cam.width * cam.height],
    };

    let zone = state.task.target_zone;
    let [a0, b0] = cam.project(zone.x0, zone.y0);
    let [a1, b1] = cam.project(zone.x1, zone.y1);
    cv.rect(a0, b0, a1, b1, ZONE);

    let held = state.gripper.holding;
    let order = state
        .items
        .iter()
        .filter(|i| Some(i.spec.id) != held)
        .chain(state.items.iter().filter(|i| Some(i.spec.id) == held));
    for item in order {
        let [x, y] = item.pose;
        let [uc, vc] = cam.project(x, y);
        let [eu, ev] = cam.scale_extent(item.spec.extent[0], item.spec.extent[1]);
        let color = rgb(item.spec.color, 1.0);
        match item.spec.shape {
            Shape::Rect => cv.rect(uc - eu / 2.0, vc - ev / 2.0, uc + eu / 2.0, vc + ev / 2.0, color),
            Shape::Disc => cv.ellipse(uc, vc, eu / 2.0, ev / 2.0, color),
        }
        if let Some([ox, oy, hw, hd]) = item.spec.handle {
            let [hu, hv] = cam.project(x + ox, y + oy);
            let [su, sv] = cam.scale_extent(hw, hd);
            cv.rect(hu - su / 2.0, hv - sv / 2.0, hu + su / 2.0, hv + sv / 2.0, rgb(item.spec.color, 0.7));
        }
    }

    let g = &state.gripper;
    let [gx, gy, gz] = g.position;
    let gain = (0.55 + 0.45 * (gz / z_max).clamp(0.0, 1.0)) as f32;
    let jaw = rgb([255, 255, 255], gain);
    let [ju, jv] = cam.scale_extent(0.012, 0.03);
    for side in [-1.0, 1.0] {
        let jx = gx + side * (g.width / 2.0 + 0.006);
        let [u, v] = cam.project3(jx, gy, gz);
        cv.rect(u - ju / 2.0, v - jv / 2.0, u + ju / 2.0, v + jv / 2.0, jaw);
    }

    let mut img = Image::new(cam.width, cam.height);
    for (dst, p) in img.data.chunks_exact_mut(3).zip(&cv.px) {
        for c in 0..3 {
            dst[c] = p[c].round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}
