//! Single-shot grid detector: a strided conv backbone whose output cell
//! predicts objectness, box offsets and category logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_map, DetectError, GraspBox, MapReport};
use crate::blob;
use crate::demo::{
    read_episode, run_expert_episode, write_episode, DatasetManifest, DemoError, LabelSource, ObservationFrame,
    ScriptedExpert,
};
use crate::nn::layers::Conv2d;
use crate::nn::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::nn::{Graph, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::sim::{Image, Simulator, TaskFamily};

const MAGIC: &[u8; 8] = b"GBDETECT";
const VERSION: u32 = 1;
/// Per-cell channels before the category logits: objectness, tx, ty, tw, th.
const BOX_CH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub categories: usize,
    /// Fixed number of candidates returned per image.
    pub candidates: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub box_weight: f64,
    /// Maximum random translation (pixels) applied to training images.
    pub augment_shift: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            channels: vec![16, 32, 48, 64],
            strides: vec![2, 2, 2, 1],
            categories: 11,
            candidates: 8,
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            box_weight: 5.0,
            augment_shift: 12,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn cell(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.cell()
    }

    fn validate(&self) -> Result<(), DetectError> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(DetectError::Config("channels and strides must be non-empty and equal length".into()));
        }
        if self.image_size % self.cell() != 0 {
            return Err(DetectError::Config("image size must be divisible by the total stride".into()));
        }
        if self.candidates == 0 || self.candidates > self.grid() * self.grid() {
            return Err(DetectError::Config("candidate count must lie in [1, grid cells]".into()));
        }
        if self.categories < 2 || self.batch_size == 0 {
            return Err(DetectError::Config("need >= 2 categories and a positive batch size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub trained_frames: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Non-zero categories absent from the training labels.
    pub missing_categories: Vec<u32>,
    pub warnings: Vec<String>,
}

/// An image with its ground-truth grasp boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub image: Image,
    pub boxes: Vec<GraspBox>,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub meta: DetectorMeta,
    store: ParamStore<f32>,
    backbone: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    meta: DetectorMeta,
    specs: Vec<ParamSpec>,
}

/// Per-image training target: `(cell, [tx, ty, tw, th], category)`.
type CellTargets = Vec<(usize, [f64; 4], usize)>;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DetectorModel {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut c_in = 3;
        let mut backbone = Vec::new();
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            backbone.push(Conv2d::new(&mut store, &format!("det.conv{i}"), c_in, c, 3, s, &mut rng));
            c_in = c;
        }
        let head = Conv2d::new(&mut store, "det.head", c_in, BOX_CH + config.categories, 1, 1, &mut rng);
        // Start objectness low so early training is not dominated by negatives.
        let hb = store.entry_mut(head.b).value.data_mut();
        hb[0] = -4.0;
        Ok(Self {
            config,
            meta: DetectorMeta::default(),
            store,
            backbone,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.backbone {
            h = conv.forward(g, store, h);
            h = g.relu(h);
        }
        self.head.forward(g, store, h)
    }

    fn input_tensor<T: Scalar>(&self, images: &[&Image]) -> Result<Tensor<T>, DetectError> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.width != s || img.height != s {
                return Err(DetectError::Data(format!(
                    "detector expects {s}x{s} images, got {}x{}",
                    img.width, img.height
                )));
            }
            data.extend(img.data.iter().map(|&p| T::lit(p as f64 / 255.0 - 0.5)));
        }
        Ok(Tensor::new(&[images.len(), s, s, 3], data))
    }

    fn targets(&self, boxes: &[GraspBox]) -> CellTargets {
        let cell = self.config.cell() as f64;
        let grid = self.config.grid();
        boxes
            .iter()
            .filter(|b| (b.category as usize) < self.config.categories)
            .map(|b| {
                let gx = ((b.cx / cell).floor() as usize).min(grid - 1);
                let gy = ((b.cy / cell).floor() as usize).min(grid - 1);
                let t = [
                    b.cx / cell - gx as f64,
                    b.cy / cell - gy as f64,
                    (b.w / cell).ln(),
                    (b.h / cell).ln(),
                ];
                (gy * grid + gx, t, b.category as usize)
            })
            .collect()
    }

    /// Objectness BCE over all cells plus box MSE and category cross-entropy
    /// on assigned cells, averaged over images. Returns `(loss, d loss/d out)`.
    fn loss_and_grad<T: Scalar>(&self, out: &[T], targets: &[CellTargets]) -> (f64, Vec<T>) {
        let ch = BOX_CH + self.config.categories;
        let cells = self.config.grid() * self.config.grid();
        let n = targets.len() as f64;
        let mut grad = vec![T::zero(); out.len()];
        let mut loss = 0.0;
        for (img, tg) in targets.iter().enumerate() {
            let base = img * cells * ch;
            let mut positive = vec![None; cells];
            for t in tg {
                positive[t.0] = Some(t);
            }
            for (c, pos) in positive.iter().enumerate() {
                let o = base + c * ch;
                let x = out[o].as_f64();
                let y = if pos.is_some() { 1.0 } else { 0.0 };
                loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                grad[o] = T::lit((sigmoid(x) - y) / n);
                let Some((_, tb, cat)) = pos else { continue };
                for k in 0..4 {
                    let d = out[o + 1 + k].as_f64() - tb[k];
                    loss += self.config.box_weight * d * d;
                    grad[o + 1 + k] = T::lit(2.0 * self.config.box_weight * d / n);
                }
                let logits: Vec<f64> = out[o + BOX_CH..o + ch].iter().map(|v| v.as_f64()).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                loss += z.ln() + m - logits[*cat];
                for (k, l) in logits.iter().enumerate() {
                    let p = (l - m).exp() / z;
                    let y = if k == *cat { 1.0 } else { 0.0 };
                    grad[o + BOX_CH + k] = T::lit((p - y) / n);
                }
            }
        }
        (loss / n, grad)
    }

    fn decode(&self, out: &[f32]) -> Vec<GraspBox> {
        let ch = BOX_CH + self.config.categories;
        let grid = self.config.grid();
        let cell = self.config.cell() as f64;
        let mut order: Vec<usize> = (0..grid * grid).collect();
        order.sort_by(|&a, &b| out[b * ch].total_cmp(&out[a * ch]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(self.config.candidates)
            .map(|c| {
                let o = c * ch;
                let v = |k: usize| out[o + k] as f64;
                let (gx, gy) = ((c % grid) as f64, (c / grid) as f64);
                let category = (0..self.config.categories)
                    .max_by(|&a, &b| v(BOX_CH + a).total_cmp(&v(BOX_CH + b)).then(b.cmp(&a)))
                    .unwrap_or(0) as u32;
                GraspBox {
                    category,
                    cx: (gx + v(1)) * cell,
                    cy: (gy + v(2)) * cell,
                    w: v(3).clamp(-8.0, 8.0).exp() * cell,
                    h: v(4).clamp(-8.0, 8.0).exp() * cell,
                    confidence: sigmoid(v(0)),
                }
                .clamped(self.config.image_size, self.config.image_size)
            })
            .collect()
    }

    /// Exactly `candidates` boxes per image, best first.
    pub fn detect_batch(&self, images: &[&Image]) -> Result<Vec<Vec<GraspBox>>, DetectError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(self.input_tensor(images)?);
        let out = self.forward(&mut g, &self.store, x);
        let per = g.value(out).len() / images.len();
        Ok(g.value(out).data().chunks(per).map(|o| self.decode(o)).collect())
    }

    pub fn detect(&self, image: &Image) -> Result<Vec<GraspBox>, DetectError> {
        Ok(self.detect_batch(&[image])?.pop().unwrap_or_default())
    }

    /// Runs `f` over `frames` in chunks to bound memory.
    fn detect_all(&self, images: &[&Image]) -> Result<Vec<Vec<GraspBox>>, DetectError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            out.extend(self.detect_batch(chunk)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, test: &[LabeledFrame]) -> Result<MapReport, DetectError> {
        if test.is_empty() {
            return Err(DetectError::EmptyTestSet);
        }
        let images: Vec<&Image> = test.iter().map(|f| &f.image).collect();
        let preds = self.detect_all(&images)?;
        let truths: Vec<Vec<GraspBox>> = test.iter().map(|f| f.boxes.clone()).collect();
        evaluate_map(&preds, &truths, 0.5)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectError> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            specs: self.store.specs(),
        };
        blob::write(path, MAGIC, VERSION, &header, &self.store.flat_values())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        let (header, flat): (Header, Vec<f32>) = blob::read(path, MAGIC, VERSION)?;
        let mut model = Self::new(header.config)?;
        let store = ParamStore::from_specs(&header.specs, &flat)
            .ok_or_else(|| DetectError::Data("parameter payload does not match specs".into()))?;
        if store.specs() != model.store.specs() {
            return Err(DetectError::Data("stored parameters do not match the architecture".into()));
        }
        model.store = store;
        model.meta = header.meta;
        Ok(model)
    }

    /// Batch loss and gradients w.r.t. all parameters, used by training and
    /// by gradient checks in double precision.
    fn batch_loss<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: Tensor<T>,
        targets: &[CellTargets],
    ) -> (f64, crate::nn::Gradients<T>) {
        let mut g = Graph::<T>::new();
        let x = g.constant(input);
        let out = self.forward(&mut g, store, x);
        let (loss, grad) = self.loss_and_grad(g.value(out).data(), targets);
        let l = g.external_loss(out, T::lit(loss), grad);
        let grads = g.backward(l);
        (loss, grads)
    }
}

/// Translates the image by `(dx, dy)` pixels, filling with the edge color
/// of the background, and moves the boxes along. Boxes whose center leaves
/// the image are dropped.
fn shifted(frame: &LabeledFrame, dx: i64, dy: i64) -> LabeledFrame {
    let (w, h) = (frame.image.width as i64, frame.image.height as i64);
    let fill = frame.image.pixel(0, 0);
    let mut img = Image::new(frame.image.width, frame.image.height);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            let p = if sx >= 0 && sx < w && sy >= 0 && sy < h {
                frame.image.pixel(sx as usize, sy as usize)
            } else {
                fill
            };
            let o = ((y * w + x) * 3) as usize;
            img.data[o..o + 3].copy_from_slice(&p);
        }
    }
    let boxes = frame
        .boxes
        .iter()
        .map(|b| GraspBox {
            cx: b.cx + dx as f64,
            cy: b.cy + dy as f64,
            ..*b
        })
        .filter(|b| b.cx >= 0.0 && b.cx < w as f64 && b.cy >= 0.0 && b.cy < h as f64)
        .collect();
    LabeledFrame { image: img, boxes }
}

/// Trains a detector on `frames` with the configured seed.
pub fn train_detector(frames: &[LabeledFrame], config: DetectorConfig) -> Result<DetectorModel, DetectError> {
    if frames.len() < 2 {
        return Err(DetectError::Data("need at least 2 labeled frames".into()));
    }
    let mut model = DetectorModel::new(config)?;
    let cfg = model.config.clone();
    let mut present = vec![false; cfg.categories];
    for b in frames.iter().flat_map(|f| &f.boxes) {
        if let Some(p) = present.get_mut(b.category as usize) {
            *p = true;
        }
    }
    let missing: Vec<u32> = (1..cfg.categories as u32).filter(|&c| !present[c as usize]).collect();
    if !missing.is_empty() {
        let msg = format!("categories {missing:?} have no training labels");
        log::warn!("{msg}");
        model.meta.warnings.push(msg);
    }
    model.meta.missing_categories = missing;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDE7EC7);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 1e-4,
            max_grad_norm: Some(5.0),
            ..Default::default()
        },
        &model.store,
    );
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.steps / 20,
        total_steps: cfg.steps,
    };
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut cursor = order.len();
    let mut last = f64::NAN;
    let bs = cfg.batch_size.min(frames.len());
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let shift = cfg.augment_shift as i64;
        let samples: Vec<LabeledFrame> = batch
            .iter()
            .map(|&i| {
                if shift == 0 {
                    return frames[i].clone();
                }
                let dx = rng.random_range(-shift..=shift);
                let dy = rng.random_range(-shift..=shift);
                shifted(&frames[i], dx, dy)
            })
            .collect();
        let images: Vec<&Image> = samples.iter().map(|f| &f.image).collect();
        let tg: Vec<CellTargets> = samples.iter().map(|f| model.targets(&f.boxes)).collect();
        let input = model.input_tensor::<f32>(&images)?;
        let (loss, grads) = model.batch_loss(&model.store, input, &tg);
        if !loss.is_finite() {
            return Err(DetectError::Data(format!("non-finite detector loss at step {step}")));
        }
        opt.step(&mut model.store, &grads, sched.lr(step));
        last = loss;
        if step % 100 == 0 {
            log::debug!("detector step {step} loss {loss:.4}");
        }
    }
    model.meta.trained_frames = frames.len();
    model.meta.steps = cfg.steps;
    model.meta.final_loss = last;
    Ok(model)
}

/// Frames from seeded expert episodes across every family, target and
/// placement, with view-0 ground-truth boxes.
pub fn sample_labeled_frames(sim: &Simulator, n: usize, seed: u64) -> Result<Vec<LabeledFrame>, DetectError> {
    let mut conditions = Vec::new();
    for family in TaskFamily::ALL {
        for target in sim.candidate_targets(family) {
            for p in 0..family.placement_count() {
                conditions.push((family, target, p));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expert = ScriptedExpert::default();
    let per_episode = 4;
    let mut out = Vec::with_capacity(n);
    let mut k = 0usize;
    while out.len() < n {
        let (family, target, p) = conditions[k % conditions.len()];
        let task = sim.task(family, p, Some(target))?;
        let ep_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64);
        k += 1;
        let rec = run_expert_episode(sim, &task, ep_seed, 200, &expert)?;
        if rec.frames.is_empty() {
            continue;
        }
        for _ in 0..per_episode.min(n - out.len()) {
            let f = &rec.frames[rng.random_range(0..rec.frames.len())];
            out.push(LabeledFrame {
                image: f.views[0].clone(),
                boxes: f.boxes.clone(),
            });
        }
    }
    Ok(out)
}

/// Replaces every frame's boxes with `detect(frame)` and writes the episodes
/// to `dst` (which may equal `src`), flipping the label source.
pub fn autolabel_with(
    manifest: &DatasetManifest,
    src: &Path,
    dst: &Path,
    mut detect: impl FnMut(&ObservationFrame) -> Result<Vec<GraspBox>, DetectError>,
) -> Result<DatasetManifest, DetectError> {
    for e in &manifest.episodes {
        let mut rec = read_episode(&manifest.episode_path(src, e))?;
        for f in &mut rec.frames {
            f.boxes = detect(f)?;
        }
        write_episode(&dst.join(&e.file), &rec)?;
    }
    let out = DatasetManifest {
        labels: LabelSource::Detector,
        ..manifest.clone()
    };
    out.save(dst).map_err(DemoError::from)?;
    Ok(out)
}

pub fn autolabel(
    model: &DetectorModel,
    manifest: &DatasetManifest,
    src: &Path,
    dst: &Path,
) -> Result<DatasetManifest, DetectError> {
    autolabel_with(manifest, src, dst, |f| {
        let view = f
            .views
            .first()
            .ok_or_else(|| DetectError::Data("frame has no views".into()))?;
        model.detect(view)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_difference, spread_coords};

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            image_size: 16,
            channels: vec![4, 6],
            strides: vec![2, 2],
            categories: 3,
            candidates: 3,
            steps: 10,
            batch_size: 2,
            lr: 1e-3,
            box_weight: 5.0,
            augment_shift: 2,
            seed: 3,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, s: usize) -> Image {
        Image {
            width: s,
            height: s,
            data: (0..s * s * 3).map(|_| rng.random::<u8>()).collect(),
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = DetectorModel::new(tiny_config()).unwrap();
        let store64: ParamStore<f64> = model.store.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = [random_image(&mut rng, 16), random_image(&mut rng, 16)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let input = model.input_tensor::<f64>(&refs).unwrap();
        let box_at = |cx, cy, c| GraspBox {
            category: c,
            cx,
            cy,
            w: 3.0,
            h: 5.0,
            confidence: 1.0,
        };
        let targets = vec![
            model.targets(&[box_at(5.0, 6.0, 1)]),
            model.targets(&[box_at(11.0, 3.0, 2), box_at(2.0, 13.0, 1)]),
        ];
        let (_, grads) = model.batch_loss(&store64, input.clone(), &targets);
        for id in store64.ids() {
            let analytic = grads.param(id).unwrap().to_vec();
            let n = analytic.len();
            let coords = spread_coords(n, 6);
            let base = store64.entry(id).value.data().to_vec();
            let chk = central_difference(&base, &analytic, &coords, 1e-5, 1e-3, |x| {
                let mut s = store64.clone();
                s.entry_mut(id).value.data_mut().copy_from_slice(x);
                model.batch_loss(&s, input.clone(), &targets).0
            });
            assert!(chk.max_rel_err < 1e-4, "{}: {chk:?}", store64.entry(id).name);
        }
    }

    #[test]
    fn output_candidate_count_fixed_and_boxes_valid() {
        let model = DetectorModel::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16);
        let boxes = model.detect(&img).unwrap();
        assert_eq!(boxes.len(), 3);
        for b in boxes {
            b.validate(16, 16, 3).unwrap();
        }
        assert!(model.detect(&Image::new(8, 8)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let model = DetectorModel::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.bin");
        model.save(&p).unwrap();
        let back = DetectorModel::load(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 16);
        assert_eq!(model.detect(&img).unwrap(), back.detect(&img).unwrap());
    }

    #[test]
    fn missing_category_warning_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<LabeledFrame> = (0..3)
            .map(|_| LabeledFrame {
                image: random_image(&mut rng, 16),
                boxes: vec![GraspBox {
                    category: 1,
                    cx: 8.0,
                    cy: 8.0,
                    w: 4.0,
                    h: 4.0,
                    confidence: 1.0,
                }],
            })
            .collect();
        let model = train_detector(&frames, tiny_config()).unwrap();
        assert_eq!(model.meta.missing_categories, vec![2]);
        assert!(!model.meta.warnings.is_empty());
        assert!(train_detector(&frames[..1], tiny_config()).is_err());
    }
}
