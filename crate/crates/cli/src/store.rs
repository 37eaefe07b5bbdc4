//! On-disk episode layout:
//!
//! ```text
//! episode.json                        T, instruction, action_dim, views, ...
//! frame_0001_front.png                one RGB image per view and frame
//! frame_0001_front_mask.pgm           optional partition (0 ACT, 1 SUP, 2 NUIS)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use causal_probe::metrics::SemanticPartition;
use causal_probe::scene::Episode;
use causal_probe::tensor::io::{read_partition_pgm, read_png, write_partition_pgm, write_png};
use causal_probe::tensor::MultiViewObservation;
use serde::{Deserialize, Serialize};

use crate::exit::validation;
use crate::manifest::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    #[serde(rename = "T")]
    pub t_len: usize,
    pub instruction: String,
    pub action_dim: usize,
    /// View names. When absent they are read off the first frame's files.
    #[serde(default)]
    pub views: Vec<String>,
    /// Recorded actions, `actions[t - 1]` as rows of the chunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Vec<Vec<f32>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct StoredEpisode {
    pub meta: EpisodeMeta,
    pub frames: Vec<MultiViewObservation>,
    /// `partitions[t - 1][view]`, present only when every frame has masks.
    pub partitions: Option<Vec<BTreeMap<String, SemanticPartition>>>,
}

impl StoredEpisode {
    /// Partitions of frame `t`, if the episode has them.
    pub fn partitions_at(&self, t: usize) -> Option<&BTreeMap<String, SemanticPartition>> {
        self.partitions.as_ref().and_then(|p| p.get(t.checked_sub(1)?))
    }
}

pub fn frame_name(t: usize, view: &str) -> String {
    format!("frame_{t:04}_{view}.png")
}

pub fn mask_name(t: usize, view: &str) -> String {
    format!("frame_{t:04}_{view}_mask.pgm")
}

fn discover_views(dir: &Path) -> Result<Vec<String>> {
    let mut views = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(view) = name.strip_prefix("frame_0001_").and_then(|r| r.strip_suffix(".png")) {
            views.push(view.to_string());
        }
    }
    views.sort();
    Ok(views)
}

pub fn read_meta(dir: &Path) -> Result<EpisodeMeta> {
    let path = dir.join("episode.json");
    let text = std::fs::read_to_string(&path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

pub fn load_episode(dir: &Path) -> Result<StoredEpisode> {
    let mut meta = read_meta(dir)?;
    if meta.t_len == 0 {
        return Err(validation(format!("{}: T must be at least 1", dir.display())));
    }
    if meta.views.is_empty() {
        meta.views = discover_views(dir)?;
    }
    if meta.views.is_empty() {
        return Err(validation(format!("{}: no frame_0001_<view>.png files", dir.display())));
    }
    if let Some(a) = &meta.actions {
        if a.len() != meta.t_len {
            return Err(validation(format!(
                "{}: {} recorded actions for T = {}",
                dir.display(),
                a.len(),
                meta.t_len
            )));
        }
    }
    let mut frames = Vec::with_capacity(meta.t_len);
    let mut partitions = Vec::with_capacity(meta.t_len);
    let mut all_masks = true;
    for t in 1..=meta.t_len {
        let mut views = BTreeMap::new();
        let mut parts = BTreeMap::new();
        for v in &meta.views {
            let png = dir.join(frame_name(t, v));
            if !png.is_file() {
                return Err(validation(format!("missing frame {}", png.display())));
            }
            let img = read_png(&png).with_context(|| png.display().to_string())?;
            let mask = dir.join(mask_name(t, v));
            if all_masks && mask.is_file() {
                let part = read_partition_pgm(&mask).with_context(|| mask.display().to_string())?;
                if part.dims() != img.dims() {
                    return Err(validation(format!(
                        "{} is {:?} but its frame is {:?}",
                        mask.display(),
                        part.dims(),
                        img.dims()
                    )));
                }
                parts.insert(v.clone(), part);
            } else {
                all_masks = false;
            }
            views.insert(v.clone(), img);
        }
        frames.push(MultiViewObservation::new(views, t).with_context(|| format!("frame {t}"))?);
        partitions.push(parts);
    }
    Ok(StoredEpisode {
        meta,
        frames,
        partitions: all_masks.then_some(partitions),
    })
}

/// Write a rendered episode (frames, masks and metadata) under `dir`.
pub fn write_episode(dir: &Path, episode: &Episode, meta: &EpisodeMeta) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for obs in &episode.frames {
        for (view, img) in &obs.views {
            let p = dir.join(frame_name(obs.timestep, view));
            write_png(img, &p)?;
            written.push(p);
            let m = dir.join(mask_name(obs.timestep, view));
            write_partition_pgm(&episode.partitions[view], &m)?;
            written.push(m);
        }
    }
    let p = dir.join("episode.json");
    std::fs::write(&p, serde_json::to_string_pretty(meta)?)?;
    written.push(p);
    Ok(written)
}
