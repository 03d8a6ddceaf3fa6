//! Observation encoder: per-view conv pyramids, low-dim state and grasp-box
//! features fused into one token per history step, then temporal
//! self-attention over the history.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::GraspBox;
use crate::nn::layers::{Conv2d, Linear, TransformerBlock};
use crate::nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::sim::{CameraModel, Image};

/// Eye-position (3) plus gripper width.
pub const LOWDIM: usize = 4;
/// Parameter-name prefix shared by everything the encoder owns.
pub const PREFIX: &str = "enc";
const TEMPORAL_PREFIX: &str = "enc.temporal";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("box category {category} >= category count {categories}")]
    Category { category: u32, categories: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub view_count: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Output channels of each stride-2 stage; each stage is pooled.
    pub stage_channels: Vec<usize>,
    /// Append normalized pixel-coordinate planes to the image input so that
    /// globally pooled features can still carry position.
    pub coord_channels: bool,
    /// Category count `C` of the box one-hot.
    pub categories: usize,
    pub token_dim: usize,
    pub history: usize,
    pub attn_depth: usize,
    pub attn_heads: usize,
    pub positional_encoding: bool,
    /// Keep the temporal transformer at its random initialization.
    pub freeze_temporal: bool,
    pub box_conditioning_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            view_count: 2,
            image_width: 96,
            image_height: 96,
            stage_channels: vec![16, 32, 48, 64],
            coord_channels: true,
            categories: 11,
            token_dim: 128,
            history: 2,
            attn_depth: 2,
            attn_heads: 4,
            positional_encoding: true,
            freeze_temporal: false,
            box_conditioning_enabled: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: &str| Err(EncoderError::Config(m.into()));
        if self.view_count == 0 || self.image_width == 0 || self.image_height == 0 {
            return fail("views and image dims must be positive");
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return fail("need at least one stage with positive channels");
        }
        if self.token_dim == 0 || self.history == 0 {
            return fail("token_dim and history must be positive");
        }
        if self.attn_heads == 0 || self.token_dim % self.attn_heads != 0 {
            return fail("token_dim must be divisible by attn_heads");
        }
        if self.categories == 0 {
            return fail("categories must be positive");
        }
        Ok(())
    }

    pub fn view_feature_dim(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    pub fn box_dim(&self) -> usize {
        self.categories + 5
    }

    pub fn fused_input_dim(&self) -> usize {
        self.view_count * self.view_feature_dim() + LOWDIM + self.box_dim()
    }

    fn input_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }
}

/// One-hot category, box geometry normalized by the view-0 image size, and a
/// validity flag. `None` gives the all-zero vector.
pub fn box_features(b: Option<&GraspBox>, camera: &CameraModel, categories: usize) -> Result<Vec<f64>, EncoderError> {
    box_features_for_size(b, (camera.width, camera.height), categories)
}

/// [`box_features`] for a view-0 image of `(width, height)` pixels.
pub fn box_features_for_size(b: Option<&GraspBox>, (width, height): (usize, usize), categories: usize) -> Result<Vec<f64>, EncoderError> {
    let mut f = vec![0.0; categories + 5];
    let Some(b) = b else { return Ok(f) };
    if b.category as usize >= categories {
        return Err(EncoderError::Category {
            category: b.category,
            categories,
        });
    }
    let (w, h) = (width as f64, height as f64);
    f[b.category as usize] = 1.0;
    f[categories..].copy_from_slice(&[b.cx / w, b.cy / h, b.w / w, b.h / h, 1.0]);
    Ok(f)
}

/// Pixels scaled to `[-0.5, 0.5]`, stacked as `[N, H, W, 3]`. Images whose
/// dims are an integer multiple of `(width, height)` are area-averaged down.
pub fn image_tensor<T: Scalar>(images: &[&Image], width: usize, height: usize) -> Result<Tensor<T>, EncoderError> {
    let mut data = Vec::with_capacity(images.len() * width * height * 3);
    for img in images {
        let f = img.width / width.max(1);
        if f == 0 || img.width != f * width || img.height != f * height {
            return Err(EncoderError::Shape(format!(
                "expected {width}x{height} image (or an integer multiple), got {}x{}",
                img.width, img.height
            )));
        }
        if f == 1 {
            data.extend(img.data.iter().map(|&p| T::lit(p as f64 / 255.0 - 0.5)));
            continue;
        }
        let inv = 1.0 / (f * f) as f64 / 255.0;
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0u32; 3];
                for sy in y * f..(y + 1) * f {
                    let row = (sy * img.width + x * f) * 3;
                    for px in img.data[row..row + 3 * f].chunks_exact(3) {
                        for c in 0..3 {
                            acc[c] += px[c] as u32;
                        }
                    }
                }
                data.extend(acc.iter().map(|&a| T::lit(a as f64 * inv - 0.5)));
            }
        }
    }
    Ok(Tensor::new(&[images.len(), height, width, 3], data))
}

/// Encoder inputs for `batch` samples of `history` frames each, rows ordered
/// sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<T> {
    pub batch: usize,
    /// One `[batch * history, H, W, 3]` tensor per view.
    pub views: Vec<Tensor<T>>,
    /// `[batch * history, LOWDIM]`, already normalized.
    pub lowdim: Tensor<T>,
    /// `[batch * history, C + 5]`.
    pub boxes: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsEncoder {
    pub config: EncoderConfig,
    views: Vec<Vec<Conv2d>>,
    fuse: Linear,
    pos: Option<ParamId>,
    blocks: Vec<TransformerBlock>,
}

impl ObsEncoder {
    pub fn new<T: Scalar>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let views = (0..config.view_count)
            .map(|v| {
                let mut c_in = config.input_channels();
                config
                    .stage_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv2d::new(store, &format!("{PREFIX}.view{v}.stage{i}"), c_in, c, 3, 2, rng);
                        c_in = c;
                        conv
                    })
                    .collect()
            })
            .collect();
        let d = config.token_dim;
        let fuse = Linear::new(store, &format!("{PREFIX}.fuse"), config.fused_input_dim(), d, rng);
        let pos = config
            .positional_encoding
            .then(|| store.uniform(format!("{TEMPORAL_PREFIX}.pos"), &[config.history, d], 0.1, rng));
        let blocks = (0..config.attn_depth)
            .map(|i| TransformerBlock::new(store, &format!("{TEMPORAL_PREFIX}.block{i}"), d, config.attn_heads, false, rng))
            .collect();
        if config.freeze_temporal {
            store.set_trainable_prefix(TEMPORAL_PREFIX, false);
        }
        Ok(Self {
            config,
            views,
            fuse,
            pos,
            blocks,
        })
    }

    /// `[N, H, W, 3]` images of one view to `[N, view_feature_dim]`.
    pub fn encode_view<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, view: usize, images: Var) -> Result<Var, EncoderError> {
        let stages = self
            .views
            .get(view)
            .ok_or_else(|| EncoderError::Shape(format!("view {view} of {}", self.config.view_count)))?;
        let (w, h) = (self.config.image_width, self.config.image_height);
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != 3 {
            return Err(EncoderError::Shape(format!("view input {s:?}, expected [N, {h}, {w}, 3]")));
        }
        let mut x = images;
        if self.config.coord_channels {
            let coords = g.constant(coord_planes(s[0], w, h));
            x = g.concat(&[x, coords]);
        }
        let mut pooled = Vec::with_capacity(stages.len());
        for conv in stages {
            x = conv.forward(g, store, x);
            x = g.relu(x);
            pooled.push(g.mean_spatial(x));
        }
        Ok(g.concat(&pooled))
    }

    /// Linear projection of `[view features ‖ lowdim ‖ boxfeat]` to `[N, d]`.
    /// With box conditioning disabled the box slice is replaced by zeros.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        view_feats: &[Var],
        lowdim: Var,
        boxfeat: Var,
    ) -> Result<Var, EncoderError> {
        let n = g.shape(lowdim)[0];
        let vf = self.config.view_feature_dim();
        if view_feats.len() != self.config.view_count {
            return Err(EncoderError::Shape(format!("{} view features for {} views", view_feats.len(), self.config.view_count)));
        }
        for &v in view_feats {
            if g.shape(v) != [n, vf] {
                return Err(EncoderError::Shape(format!("view feature {:?}, expected [{n}, {vf}]", g.shape(v))));
            }
        }
        if g.shape(lowdim) != [n, LOWDIM] {
            return Err(EncoderError::Shape(format!("lowdim {:?}", g.shape(lowdim))));
        }
        let bd = self.config.box_dim();
        if g.shape(boxfeat) != [n, bd] {
            return Err(EncoderError::Shape(format!("box features {:?}, expected [{n}, {bd}]", g.shape(boxfeat))));
        }
        let boxfeat = if self.config.box_conditioning_enabled {
            boxfeat
        } else {
            g.constant(Tensor::zeros(&[n, bd]))
        };
        let mut parts = view_feats.to_vec();
        parts.push(lowdim);
        parts.push(boxfeat);
        let x = g.concat(&parts);
        Ok(self.fuse.forward(g, store, x))
    }

    /// Self-attention across the history of `[B, T_o, d]` tokens.
    pub fn temporal_attend<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var, EncoderError> {
        let (t_o, d) = (self.config.history, self.config.token_dim);
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != t_o || s[2] != d {
            return Err(EncoderError::Shape(format!("tokens {s:?}, expected [B, {t_o}, {d}]")));
        }
        let mut x = tokens;
        if let Some(pos) = self.pos {
            let p = g.param(store, pos);
            x = g.add_broadcast(x, p);
        }
        for block in &self.blocks {
            x = block.forward(g, store, x, None);
        }
        Ok(x)
    }

    /// Full encoder: `[B, T_o, d]` observation tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &EncoderInput<T>) -> Result<Var, EncoderError> {
        let rows = input.batch * self.config.history;
        if input.views.len() != self.config.view_count {
            return Err(EncoderError::Shape(format!("{} views supplied", input.views.len())));
        }
        if input.lowdim.shape().first() != Some(&rows) || input.boxes.shape().first() != Some(&rows) {
            return Err(EncoderError::Shape(format!("expected {rows} rows of lowdim and box features")));
        }
        let mut feats = Vec::with_capacity(input.views.len());
        for (v, imgs) in input.views.iter().enumerate() {
            if imgs.shape().first() != Some(&rows) {
                return Err(EncoderError::Shape(format!("view {v} has {:?}, expected {rows} images", imgs.shape())));
            }
            let x = g.constant(imgs.clone());
            feats.push(self.encode_view(g, store, v, x)?);
        }
        let lowdim = g.constant(input.lowdim.clone());
        let boxes = g.constant(input.boxes.clone());
        let tokens = self.fuse(g, store, &feats, lowdim, boxes)?;
        let tokens = g.reshape(tokens, &[input.batch, self.config.history, self.config.token_dim]);
        self.temporal_attend(g, store, tokens)
    }
}

/// `[N, H, W, 2]` planes holding pixel x and y scaled to `[-0.5, 0.5]`.
fn coord_planes<T: Scalar>(n: usize, w: usize, h: usize) -> Tensor<T> {
    let mut plane = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            plane.push(T::lit((x as f64 + 0.5) / w as f64 - 0.5));
            plane.push(T::lit((y as f64 + 0.5) / h as f64 - 0.5));
        }
    }
    let data = plane.iter().copied().cycle().take(n * plane.len()).collect();
    Tensor::new(&[n, h, w, 2], data)
}
