//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/episodes/ep_000000.bin
//! ```
//!
//! An episode file is `b"GBEPISOD"`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header (everything but pixels),
//! then every image's raw RGB8 bytes in frame-major, view-minor order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DemoError, EpisodeOutcome, EpisodeRecord, ObservationFrame};
use crate::detect::GraspBox;
use crate::sim::{ActionCommand, Catalog, Image, ItemId, SimEvent, TaskFamily, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GBEPISOD";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where the frames' `boxes` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Oracle,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode_id: u64,
    pub file: String,
    pub placement_id: u32,
    pub target_item: ItemId,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotInfo {
    pub heldout_item: ItemId,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub family: TaskFamily,
    pub seed: u64,
    pub labels: LabelSource,
    pub episodes: Vec<EpisodeEntry>,
    #[serde(default)]
    pub fewshot: Option<FewShotInfo>,
    /// Path of the normalization statistics, relative to the dataset dir.
    #[serde(default)]
    pub normalization: Option<String>,
    /// Catalog the episodes were generated with, for exact replay.
    pub catalog: Catalog,
}

impl DatasetManifest {
    /// Episode counts keyed by `(placement_id, target_item)`.
    pub fn counts(&self) -> BTreeMap<(u32, ItemId), usize> {
        let mut m = BTreeMap::new();
        for e in &self.episodes {
            *m.entry((e.placement_id, e.target_item)).or_insert(0) += 1;
        }
        m
    }

    pub fn count_for_item(&self, item: ItemId) -> usize {
        self.episodes.iter().filter(|e| e.target_item == item).count()
    }

    pub fn load(dir: &Path) -> Result<Self, DemoError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DemoError::Format(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(DemoError::Version {
                found: m.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DemoError> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| DemoError::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn episode_path(&self, dir: &Path, entry: &EpisodeEntry) -> PathBuf {
        dir.join(&entry.file)
    }

    /// Loads every episode listed in the manifest.
    pub fn load_episodes(&self, dir: &Path) -> Result<Vec<EpisodeRecord>, DemoError> {
        self.episodes
            .iter()
            .map(|e| read_episode(&self.episode_path(dir, e)))
            .collect()
    }

    /// Checks that every listed episode exists with the recorded frame count.
    pub fn verify(&self, dir: &Path) -> Result<(), DemoError> {
        for e in &self.episodes {
            let rec = read_episode(&self.episode_path(dir, e))?;
            if rec.episode_id != e.episode_id || rec.frames.len() != e.frames {
                return Err(DemoError::Format(format!("episode {} disagrees with manifest", e.episode_id)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    eef_pose: [f64; 3],
    gripper_width: f64,
    boxes: Vec<GraspBox>,
    timestep: u32,
    views: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    episode_id: u64,
    seed: u64,
    task: TaskSpec,
    actions: Vec<ActionCommand>,
    events: Vec<SimEvent>,
    outcome: EpisodeOutcome,
    #[serde(default)]
    conditioning: Vec<Option<GraspBox>>,
    frames: Vec<FrameMeta>,
}

pub fn episode_file_name(id: u64) -> String {
    format!("episodes/ep_{id:06}.bin")
}

pub fn write_episode(path: &Path, rec: &EpisodeRecord) -> Result<(), DemoError> {
    if rec.frames.len() != rec.actions.len() {
        return Err(DemoError::Format(format!(
            "episode {}: {} frames but {} actions",
            rec.episode_id,
            rec.frames.len(),
            rec.actions.len()
        )));
    }
    let header = EpisodeHeader {
        episode_id: rec.episode_id,
        seed: rec.seed,
        task: rec.task.clone(),
        actions: rec.actions.clone(),
        events: rec.events.clone(),
        outcome: rec.outcome,
        conditioning: rec.conditioning.clone(),
        frames: rec
            .frames
            .iter()
            .map(|f| FrameMeta {
                eef_pose: f.eef_pose,
                gripper_width: f.gripper_width,
                boxes: f.boxes.clone(),
                timestep: f.timestep,
                views: f.views.iter().map(|v| (v.width, v.height)).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DemoError::Format(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for f in &rec.frames {
        for v in &f.views {
            out.write_all(&v.data)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord, DemoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| DemoError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not an episode file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DemoError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: EpisodeHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
    let mut pixels = &body[hlen..];
    let mut frames = Vec::with_capacity(header.frames.len());
    for meta in header.frames {
        let mut views = Vec::with_capacity(meta.views.len());
        for (w, h) in meta.views {
            let n = w * h * 3;
            if pixels.len() < n {
                return Err(corrupt("truncated image data"));
            }
            views.push(Image {
                width: w,
                height: h,
                data: pixels[..n].to_vec(),
            });
            pixels = &pixels[n..];
        }
        frames.push(ObservationFrame {
            views,
            eef_pose: meta.eef_pose,
            gripper_width: meta.gripper_width,
            boxes: meta.boxes,
            timestep: meta.timestep,
        });
    }
    if !pixels.is_empty() {
        return Err(corrupt("trailing bytes after image data"));
    }
    if frames.len() != header.actions.len() {
        return Err(corrupt("frame/action count mismatch"));
    }
    Ok(EpisodeRecord {
        episode_id: header.episode_id,
        seed: header.seed,
        task: header.task,
        frames,
        actions: header.actions,
        events: header.events,
        outcome: header.outcome,
        conditioning: header.conditioning,
    })
}

/// Writes every episode and the manifest describing them.
pub fn write_dataset(
    dir: &Path,
    family: TaskFamily,
    seed: u64,
    catalog: &Catalog,
    labels: LabelSource,
    episodes: &[EpisodeRecord],
) -> Result<DatasetManifest, DemoError> {
    let mut entries = Vec::with_capacity(episodes.len());
    for rec in episodes {
        let file = episode_file_name(rec.episode_id);
        write_episode(&dir.join(&file), rec)?;
        entries.push(EpisodeEntry {
            episode_id: rec.episode_id,
            file,
            placement_id: rec.task.placement_id,
            target_item: rec.task.target_item,
            seed: rec.seed,
            frames: rec.frames.len(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        family,
        seed,
        labels,
        episodes: entries,
        fewshot: None,
        normalization: None,
        catalog: catalog.clone(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}
