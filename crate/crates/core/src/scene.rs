//! Procedural test scenes: bright action and support blocks plus dark
//! distractor blobs on a lightly textured mid-gray background.
//!
//! Dropping a cell swaps it for a blurred copy, which pulls every region mean
//! toward its surroundings. In this layout that darkens the bright causal
//! blocks and brightens the nuisance region (at the block borders and at the
//! dark blobs). [`aligned_weights`] signs the policy weights so each of those
//! changes pushes the action the same way.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Label, SemanticPartition};
use crate::policy::synthetic::RegionWeights;
use crate::rng::{derive_seed, keyed_rng};
use crate::tensor::{ImageTensor, MultiViewObservation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub views: Vec<String>,
    pub frames: usize,
    pub act: Rect,
    pub sup: Rect,
    pub distractors: Vec<Rect>,
    pub act_color: [f32; 3],
    pub sup_color: [f32; 3],
    pub background: f32,
    pub distractor_level: f32,
    /// Half-width of the uniform per-pixel texture on the background.
    pub texture: f32,
    /// Half-width of the per-frame brightness jitter of the causal blocks.
    pub frame_jitter: f32,
    pub instruction: String,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 56,
            height: 56,
            views: vec!["front".into(), "overhead".into(), "wrist".into()],
            frames: 10,
            act: Rect::new(16, 16, 24, 16),
            sup: Rect::new(16, 32, 24, 8),
            distractors: vec![Rect::new(40, 0, 8, 8), Rect::new(0, 40, 8, 8), Rect::new(48, 48, 8, 8)],
            act_color: [0.95, 0.9, 0.85],
            sup_color: [0.85, 0.95, 0.8],
            background: 0.45,
            distractor_level: 0.05,
            texture: 0.03,
            frame_jitter: 0.02,
            instruction: "place the block on the support".into(),
            seed: 0,
        }
    }
}

/// A rendered episode with one partition per view (the layout is static).
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<MultiViewObservation>,
    pub partitions: BTreeMap<String, SemanticPartition>,
    pub instruction: String,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 || self.views.is_empty() {
            return Err(Error::param("scene needs nonzero size, at least one frame and one view"));
        }
        for r in [&self.act, &self.sup].into_iter().chain(&self.distractors) {
            if r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::param(format!("rectangle {r:?} leaves the {}x{} image", self.width, self.height)));
            }
        }
        Ok(())
    }

    /// Label of pixel `(x, y)`: ACT over SUP over NUIS.
    pub fn label(&self, x: usize, y: usize) -> Label {
        if self.act.contains(x, y) {
            Label::Act
        } else if self.sup.contains(x, y) {
            Label::Sup
        } else {
            Label::Nuis
        }
    }

    pub fn partition(&self) -> Result<SemanticPartition> {
        let labels = (0..self.width * self.height)
            .map(|i| self.label(i % self.width, i / self.width))
            .collect();
        SemanticPartition::new(self.width, self.height, labels)
    }

    /// Pixel fraction of each label implied by the layout, in ACT, SUP, NUIS
    /// order.
    pub fn layout_fractions(&self) -> [f64; 3] {
        let n = (self.width * self.height) as f64;
        let act = (self.act.w * self.act.h) as f64;
        let overlap = overlap(&self.act, &self.sup) as f64;
        let sup = (self.sup.w * self.sup.h) as f64 - overlap;
        [act / n, sup / n, (n - act - sup) / n]
    }

    /// One view at 1-based frame `t`.
    pub fn render_view(&self, view_index: usize, t: usize) -> Result<ImageTensor> {
        let mut rng = keyed_rng(derive_seed(self.seed, &[view_index as u64, t as u64]), 0);
        let jitter = if self.frame_jitter > 0.0 {
            rng.random_range(-self.frame_jitter..=self.frame_jitter)
        } else {
            0.0
        };
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let noise = if self.texture > 0.0 {
                    rng.random_range(-self.texture..=self.texture)
                } else {
                    0.0
                };
                let px: [f32; 3] = match self.label(x, y) {
                    Label::Act => self.act_color.map(|c| c + jitter),
                    Label::Sup => self.sup_color.map(|c| c + jitter),
                    Label::Nuis if self.distractors.iter().any(|r| r.contains(x, y)) => {
                        [self.distractor_level + noise; 3]
                    }
                    Label::Nuis => [self.background + noise; 3],
                };
                data.extend(px.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        ImageTensor::from_f32(self.width, self.height, 3, data)
    }

    pub fn render(&self) -> Result<Episode> {
        self.validate()?;
        let part = self.partition()?;
        let frames = (1..=self.frames)
            .map(|t| {
                let views = self
                    .views
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Ok((v.clone(), self.render_view(i, t)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                MultiViewObservation::new(views, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            frames,
            partitions: self.views.iter().map(|v| (v.clone(), part.clone())).collect(),
            instruction: self.instruction.clone(),
        })
    }
}

fn overlap(a: &Rect, b: &Rect) -> usize {
    let w = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x));
    let h = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y));
    w * h
}

/// Weights under which darkening the causal blocks and brightening the
/// nuisance region both raise every action component.
pub fn aligned_weights(action_dim: usize) -> RegionWeights {
    let s: Vec<f32> = (0..action_dim).map(|c| 1.0 / (1.0 + c as f32)).collect();
    RegionWeights {
        act: s.iter().map(|v| -v).collect(),
        sup: s.iter().map(|v| -0.5 * v).collect(),
        nuis: s,
    }
}
