//! Attention-score and token-norm saliency baselines, computed from
//! introspection payloads the policy hands back, and the token-grid to heatmap
//! path they share.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{resize_plane, ScalarField};

/// Tolerance on attention row sums.
pub const ROW_SUM_TOLERANCE: f32 = 1e-4;

/// Encoder internals for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrospectionPayload {
    n_tokens: usize,
    /// Head-averaged attention, row-major `n_tokens x n_tokens`; row = query.
    attention: Vec<f32>,
    dim: usize,
    /// Row-major `n_tokens x dim`.
    embeddings: Vec<f32>,
    /// Per view, the token indices of its spatial grid in row-major order.
    spatial_token_map: BTreeMap<String, Vec<usize>>,
}

impl IntrospectionPayload {
    /// Validate and wrap a head-averaged payload.
    pub fn new(
        n_tokens: usize,
        attention: Vec<f32>,
        dim: usize,
        embeddings: Vec<f32>,
        spatial_token_map: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if attention.len() != n_tokens * n_tokens {
            return Err(Error::Payload(format!(
                "attention has {} entries for {n_tokens} tokens",
                attention.len()
            )));
        }
        if embeddings.len() != n_tokens * dim {
            return Err(Error::Payload(format!(
                "embeddings have {} entries for {n_tokens}x{dim}",
                embeddings.len()
            )));
        }
        let payload = Self {
            n_tokens,
            attention,
            dim,
            embeddings,
            spatial_token_map,
        };
        payload.validate()?;
        Ok(payload)
    }

    /// Average `heads x n x n` attention over heads, then validate.
    pub fn from_heads(
        heads: usize,
        n_tokens: usize,
        per_head: &[f32],
        dim: usize,
        embeddings: Vec<f32>,
        spatial_token_map: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let nn = n_tokens * n_tokens;
        if heads == 0 || per_head.len() != heads * nn {
            return Err(Error::Payload(format!(
                "per-head attention has {} entries for {heads}x{n_tokens}x{n_tokens}",
                per_head.len()
            )));
        }
        let mut mean = vec![0.0f64; nn];
        for head in per_head.chunks_exact(nn) {
            for (m, &v) in mean.iter_mut().zip(head) {
                *m += v as f64;
            }
        }
        let attention = mean.iter().map(|&m| (m / heads as f64) as f32).collect();
        Self::new(n_tokens, attention, dim, embeddings, spatial_token_map)
    }

    pub fn validate(&self) -> Result<()> {
        for (q, row) in self.attention.chunks_exact(self.n_tokens.max(1)).enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Payload(format!("attention row {q} has entry {v}")));
            }
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE as f64 {
                return Err(Error::Payload(format!(
                    "attention row {q} sums to {s}, not a softmax row"
                )));
            }
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Payload("embeddings contain non-finite values".into()));
        }
        let mut seen = BTreeSet::new();
        for (view, idx) in &self.spatial_token_map {
            for &i in idx {
                if i >= self.n_tokens {
                    return Err(Error::Payload(format!(
                        "view {view}: token {i} out of range for {} tokens",
                        self.n_tokens
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Payload(format!("token {i} is mapped to more than one grid cell")));
                }
            }
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attention(&self) -> &[f32] {
        &self.attention
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn spatial_token_map(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.spatial_token_map
    }

    pub fn spatial_token_count(&self) -> usize {
        self.spatial_token_map.values().map(Vec::len).sum()
    }
}

/// Attention mass received by each token: `S(i) = Σ_j Ā[j, i]`.
pub fn attention_score(payload: &IntrospectionPayload) -> Vec<f32> {
    let n = payload.n_tokens;
    let mut cols = vec![0.0f64; n];
    for row in payload.attention.chunks_exact(n.max(1)) {
        for (c, &v) in cols.iter_mut().zip(row) {
            *c += v as f64;
        }
    }
    cols.into_iter().map(|c| c as f32).collect()
}

/// L2 norm of each token embedding.
pub fn token_norm_score(payload: &IntrospectionPayload) -> Vec<f32> {
    payload
        .embeddings
        .chunks_exact(payload.dim.max(1))
        .map(|z| z.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32)
        .take(payload.n_tokens)
        .chain(std::iter::repeat(0.0))
        .take(payload.n_tokens)
        .collect()
}

/// Factor `n` spatial tokens into a `(w, h)` grid matching the output aspect.
fn grid_shape(n: usize, out_w: usize, out_h: usize) -> Option<(usize, usize)> {
    if n == 0 {
        return None;
    }
    let aspect = out_w as f64 / out_h as f64;
    let w = ((n as f64 * aspect).sqrt()).round().max(1.0) as usize;
    (n % w == 0).then(|| (w, n / w))
}

/// Reshape a view's spatial token scores into its grid and upsample
/// bilinearly to `out_dims`.
pub fn tokens_to_heatmap(
    scores: &[f32],
    payload: &IntrospectionPayload,
    view: &str,
    out_dims: (usize, usize),
) -> Result<ScalarField> {
    if scores.len() != payload.n_tokens {
        return Err(Error::Payload(format!(
            "{} scores for {} tokens",
            scores.len(),
            payload.n_tokens
        )));
    }
    let idx = payload
        .spatial_token_map
        .get(view)
        .ok_or_else(|| Error::Payload(format!("no spatial tokens for view {view}")))?;
    let (gw, gh) = grid_shape(idx.len(), out_dims.0, out_dims.1).ok_or_else(|| {
        Error::Payload(format!(
            "view {view}: {} spatial tokens do not form a grid with aspect {}x{}",
            idx.len(),
            out_dims.0,
            out_dims.1
        ))
    })?;
    let grid: Vec<f32> = idx.iter().map(|&i| scores[i]).collect();
    let data = resize_plane(&grid, gw, gh, out_dims.0, out_dims.1)?;
    ScalarField::new(out_dims.0, out_dims.1, data)
}
