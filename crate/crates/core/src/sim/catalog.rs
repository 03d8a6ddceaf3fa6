//! Human-readable scene/task catalog (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ItemId, ItemSpec, Rect2, SimError};

/// Physical tolerances and kinematic limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub z_grasp: f64,
    pub w_tol: f64,
    pub max_step: f64,
    pub width_rate: f64,
    pub width_max: f64,
    pub close_threshold: f64,
    pub release_threshold: f64,
    pub workspace: [f64; 4],
    pub z_max: f64,
    pub home: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub oblique_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickBigLayout {
    /// `[big, small]`.
    pub items: [ItemId; 2],
    pub zone: Rect2,
    pub jitter: f64,
    pub placements: Vec<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickCupLayout {
    pub items: Vec<ItemId>,
    pub zone: Rect2,
    pub jitter: f64,
    pub placements: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickGoodsLayout {
    pub items: Vec<ItemId>,
    pub zone: Rect2,
    pub jitter: f64,
    pub positions: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub tolerances: Tolerances,
    pub camera: CameraConfig,
    pub items: Vec<ItemSpec>,
    pub pick_big: PickBigLayout,
    pub pick_cup: PickCupLayout,
    pub pick_goods: PickGoodsLayout,
}

const DEFAULT_CATALOG: &str = include_str!("../../configs/catalog.toml");

impl Default for Catalog {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }
}

impl Catalog {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cat: Catalog = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cat.validate()?;
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    /// Same catalog rendering at a different image size.
    pub fn with_image_size(mut self, width: usize, height: usize) -> Self {
        self.camera.width = width;
        self.camera.height = height;
        self
    }

    pub fn item(&self, id: ItemId) -> Option<&ItemSpec> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Number of category labels, including the reserved "unknown" class 0.
    pub fn category_count(&self) -> usize {
        self.items.iter().map(|i| i.category as usize + 1).max().unwrap_or(1)
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        for item in &self.items {
            item.validate()?;
        }
        let all_ids = self
            .pick_big
            .items
            .iter()
            .chain(&self.pick_cup.items)
            .chain(&self.pick_goods.items);
        for id in all_ids {
            if self.item(*id).is_none() {
                return bad(format!("layout references unknown item {id}"));
            }
        }
        if self.pick_big.placements.len() != 8 {
            return bad("pick_big needs 8 placements".into());
        }
        if self.pick_cup.placements.len() != 4 {
            return bad("pick_cup needs 4 placements".into());
        }
        if self.pick_goods.positions.len() != self.pick_goods.items.len() {
            return bad("pick_goods positions must match items".into());
        }
        let t = &self.tolerances;
        if !(t.close_threshold < t.release_threshold && t.release_threshold <= t.width_max) {
            return bad("need close_threshold < release_threshold <= width_max".into());
        }
        if self.camera.views == 0 || self.camera.width == 0 || self.camera.height == 0 {
            return bad("camera must have at least one non-empty view".into());
        }
        Ok(())
    }
}
