//! Interventional significance scores.
//!
//! For each computed timestep the engine queries the policy once on the clean
//! frame and once per coarse mask on a frame where dropped cells are swapped
//! for a blurred copy. Each pixel accumulates `δ_k (1 - m_k)` in mask order and
//! the sum is divided by `N (1 - p)`. Frames between computed ones are filled
//! by linear interpolation.
//!
//! Masks are drawn once per view and reused at every computed timestep unless
//! [`IssConfig::resample_per_timestep`] is set. Each view gets its own batch,
//! so one query perturbs every view at once and every view's map sees every
//! query.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{check_keep_prob, sample_mask_batch, Grid, MaskBatch};
use crate::policy::PolicyHandle;
use crate::rng::derive_seed;
use crate::tensor::{gaussian_blur, resize_plane, ImageTensor, MultiViewObservation, ScalarField};

/// A point prediction: `steps` rows of `dim` values (one row when the policy
/// does not predict chunks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f32>>", into = "Vec<Vec<f32>>")]
pub struct ActionVector {
    dim: usize,
    data: Vec<f32>,
}

impl ActionVector {
    pub fn single(values: Vec<f32>) -> Result<Self> {
        Self::from_flat(1, values.len(), values)
    }

    pub fn chunked(rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::dims("action chunk rows differ in length"));
        }
        let steps = rows.len();
        Self::from_flat(steps, dim, rows.into_iter().flatten().collect())
    }

    pub fn from_flat(steps: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(Error::param("action must have at least one step and one component"));
        }
        if data.len() != steps * dim {
            return Err(Error::dims(format!("{} action values for {steps}x{dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("action contains non-finite values"));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(steps: usize, dim: usize) -> Result<Self> {
        Self::from_flat(steps, dim, vec![0.0; steps * dim])
    }

    /// `(steps, dim)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.data.len() / self.dim, self.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// The first (or only) step.
    pub fn values(&self) -> &[f32] {
        &self.data[..self.dim]
    }

    pub fn chunk(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        self.chunk().map(<[f32]>::to_vec).collect()
    }

    /// Sum of squared differences over every value of every step.
    pub fn squared_distance(&self, other: &ActionVector) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "action shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum())
    }
}

impl TryFrom<Vec<Vec<f32>>> for ActionVector {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f32>>) -> Result<Self> {
        Self::chunked(rows)
    }
}

impl From<ActionVector> for Vec<Vec<f32>> {
    fn from(a: ActionVector) -> Self {
        a.rows()
    }
}

/// Isotropic Gaussian action head `N(mean, sigma² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyParams {
    pub mean: ActionVector,
    pub sigma: f64,
}

/// `KL(p1 || p2) = ||μ1 − μ2||² / (2σ²)` for two Gaussians sharing one
/// isotropic covariance.
pub fn kl_isotropic_gaussian(p1: &GaussianPolicyParams, p2: &GaussianPolicyParams) -> Result<f64> {
    if !(p1.sigma > 0.0) || !p1.sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {}", p1.sigma)));
    }
    if p1.sigma != p2.sigma {
        return Err(Error::param(format!(
            "closed form assumes both heads share one isotropic covariance (homoscedastic); got sigma {} and {}",
            p1.sigma, p2.sigma
        )));
    }
    let d2 = p1.mean.squared_distance(&p2.mean)?;
    Ok(d2 / (2.0 * p1.sigma * p1.sigma))
}

fn default_n_masks() -> usize {
    100
}
fn default_keep_prob() -> f32 {
    0.3
}
fn default_stride() -> usize {
    1
}
fn default_blur_sigma() -> f32 {
    9.0
}
fn default_policy_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssConfig {
    #[serde(default = "default_n_masks")]
    pub n_masks: usize,
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f32,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Width of the blur that stands in for dropped cells, in pixels.
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f32,
    #[serde(default)]
    pub grid: Grid,
    /// Draw a fresh batch at every computed timestep instead of reusing one.
    #[serde(default)]
    pub resample_per_timestep: bool,
    /// Action-head std used only to express scores in KL units.
    #[serde(default = "default_policy_sigma")]
    pub policy_sigma: f64,
}

impl Default for IssConfig {
    fn default() -> Self {
        Self {
            n_masks: default_n_masks(),
            keep_prob: default_keep_prob(),
            stride: default_stride(),
            blur_sigma: default_blur_sigma(),
            grid: Grid::default(),
            resample_per_timestep: false,
            policy_sigma: default_policy_sigma(),
        }
    }
}

impl IssConfig {
    pub fn validate(&self) -> Result<()> {
        check_keep_prob(self.keep_prob)?;
        if self.n_masks == 0 {
            return Err(Error::param("n_masks must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::param("stride must be at least 1"));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::param(format!("blur_sigma must be positive, got {}", self.blur_sigma)));
        }
        if self.grid.cells() == 0 {
            return Err(Error::param("mask grid has no cells"));
        }
        if !(self.policy_sigma > 0.0) || !self.policy_sigma.is_finite() {
            return Err(Error::param("policy_sigma must be positive"));
        }
        Ok(())
    }

    /// `N (1 - p)` in f64.
    pub fn denominator(&self) -> f64 {
        self.n_masks as f64 * (1.0 - self.keep_prob as f64)
    }
}

/// Frames `1, 1 + s, 1 + 2s, ...` plus the last frame, as 1-based timesteps.
pub fn computed_frames(t_len: usize, stride: usize) -> Vec<usize> {
    let mut frames: Vec<usize> = (1..=t_len).step_by(stride.max(1)).collect();
    if frames.last() != Some(&t_len) && t_len > 0 {
        frames.push(t_len);
    }
    frames
}

/// Per-view saliency maps over an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStream {
    /// `maps[view][t - 1]`.
    pub maps: BTreeMap<String, Vec<ScalarField>>,
    /// `computed[t - 1]`.
    pub computed: Vec<bool>,
    /// Coarse cells never dropped by any mask used for a view. Their scores
    /// are 0 and carry no information.
    pub undefined_cells: BTreeMap<String, Vec<usize>>,
    pub config: IssConfig,
    pub master_seed: u64,
}

impl SaliencyStream {
    pub fn len(&self) -> usize {
        self.computed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.computed.is_empty()
    }

    pub fn map(&self, view: &str, t: usize) -> Option<&ScalarField> {
        self.maps.get(view)?.get(t.checked_sub(1)?)
    }

    pub fn computed_frames(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&t| self.computed[t - 1]).collect()
    }

    /// `Σ_t S_t` for one view: the horizon aggregate that sums per-frame
    /// scores over the episode.
    pub fn horizon_sum(&self, view: &str) -> Result<ScalarField> {
        let frames = self
            .maps
            .get(view)
            .ok_or_else(|| Error::param(format!("no maps for view {view}")))?;
        let (w, h) = frames[0].dims();
        let mut acc = vec![0.0f64; w * h];
        for f in frames {
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v as f64;
            }
        }
        ScalarField::new(w, h, acc.into_iter().map(|v| v as f32).collect())
    }

    /// The same maps expressed in KL units, `S / (2σ²)`.
    pub fn kl_scaled(&self) -> Result<SaliencyStream> {
        let c = (1.0 / (2.0 * self.config.policy_sigma * self.config.policy_sigma)) as f32;
        let maps = self
            .maps
            .iter()
            .map(|(v, frames)| Ok((v.clone(), frames.iter().map(|f| f.scaled(c)).collect::<Result<_>>()?)))
            .collect::<Result<_>>()?;
        Ok(SaliencyStream { maps, ..self.clone() })
    }
}

/// The fixed-denominator estimate `Σ_k (1 − m_k) L_k / (N (1 − p))` for one
/// token, summed in `k` order.
pub fn iss_token_estimate(losses: &[f64], mask_bits: &[u8], p: f32) -> Result<f64> {
    check_keep_prob(p)?;
    if losses.len() != mask_bits.len() {
        return Err(Error::dims(format!(
            "{} losses for {} mask bits",
            losses.len(),
            mask_bits.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::param("estimator needs at least one sample"));
    }
    let mut acc = 0.0f64;
    for (&l, &m) in losses.iter().zip(mask_bits) {
        acc += l * (1.0 - m as f64);
    }
    Ok(acc / (losses.len() as f64 * (1.0 - p as f64)))
}

/// Largest token count [`psi_exact`] will enumerate.
pub const MAX_EXACT_TOKENS: usize = 16;

/// Exact risk `Ψ_i(p) = E[L | m_i = 0]` for every token by enumerating all
/// `2^m` masks. `loss` maps a bit pattern (1 = keep) to its loss.
pub fn psi_exact<F>(m: usize, p: f32, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&[u8]) -> Result<f64> + Sync,
{
    check_keep_prob(p)?;
    if m == 0 || m > MAX_EXACT_TOKENS {
        return Err(Error::param(format!(
            "exact enumeration needs 1..={MAX_EXACT_TOKENS} tokens, got {m}"
        )));
    }
    let p = p as f64;
    let per_mask = (0u32..1 << m)
        .into_par_iter()
        .map(|code| {
            let bits: Vec<u8> = (0..m).map(|j| ((code >> j) & 1) as u8).collect();
            let weight: f64 = bits.iter().map(|&b| if b == 1 { p } else { 1.0 - p }).product();
            let l = loss(&bits)?;
            Ok((bits, weight, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..m)
        .map(|i| {
            per_mask
                .iter()
                .filter(|(bits, _, _)| bits[i] == 0)
                .map(|(_, w, l)| w * l)
                .sum::<f64>()
                / (1.0 - p)
        })
        .collect())
}

/// Pixels of the dense mask for `bits` on `grid`, upsampled to `target`.
pub fn dense_from_bits(bits: &[u8], grid: Grid, target: (usize, usize)) -> Result<ScalarField> {
    if bits.len() != grid.cells() {
        return Err(Error::dims(format!("{} bits for a {}x{} grid", bits.len(), grid.w, grid.h)));
    }
    let plane: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
    let data = resize_plane(&plane, grid.w, grid.h, target.0, target.1)?;
    ScalarField::new(target.0, target.1, data)
}

/// Every view of `obs` blurred once.
pub fn blurred_views(obs: &MultiViewObservation, sigma: f32) -> Result<BTreeMap<String, ImageTensor>> {
    obs.views
        .iter()
        .map(|(name, img)| Ok((name.clone(), gaussian_blur(img, sigma)?)))
        .collect()
}

/// Blend each view with its blurred copy under its own dense mask.
pub fn perturbed_observation(
    obs: &MultiViewObservation,
    blurred: &BTreeMap<String, ImageTensor>,
    dense: &BTreeMap<String, ScalarField>,
) -> Result<MultiViewObservation> {
    obs.map_views(|name, img| {
        let b = blurred
            .get(name)
            .ok_or_else(|| Error::param(format!("no blurred copy of view {name}")))?;
        let m = dense
            .get(name)
            .ok_or_else(|| Error::param(format!("no mask for view {name}")))?;
        crate::masks::blend(img, b, m)
    })
}

/// Exact `Ψ_i(p)` for every coarse cell of every view of `obs`, with tokens
/// numbered view by view in name order. The loss is the squared action
/// deviation used by [`iss_stream`].
pub fn estimate_psi_exact(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    grid: Grid,
    p: f32,
    blur_sigma: f32,
) -> Result<Vec<f64>> {
    let per_view = grid.cells();
    let m = per_view * obs.views.len();
    if m > MAX_EXACT_TOKENS {
        return Err(Error::param(format!(
            "exact enumeration over {m} tokens refused (limit {MAX_EXACT_TOKENS})"
        )));
    }
    let loss = exact_loss_fn(policy, obs, instruction, grid, blur_sigma)?;
    psi_exact(m, p, loss)
}

/// The squared action deviation as a function of a concatenated bit pattern
/// (views in name order, `grid.cells()` bits each).
pub fn exact_loss_fn<'a>(
    policy: &'a PolicyHandle,
    obs: &'a MultiViewObservation,
    instruction: &'a str,
    grid: Grid,
    blur_sigma: f32,
) -> Result<impl Fn(&[u8]) -> Result<f64> + Sync + 'a> {
    let blurred = blurred_views(obs, blur_sigma)?;
    let baseline = policy
        .act(obs, instruction)
        .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source })?;
    Ok(move |bits: &[u8]| -> Result<f64> {
        let per_view = grid.cells();
        if bits.len() != per_view * obs.views.len() {
            return Err(Error::dims("bit pattern does not cover every view"));
        }
        let dense = obs
            .views
            .iter()
            .zip(bits.chunks_exact(per_view))
            .map(|((name, img), b)| Ok((name.clone(), dense_from_bits(b, grid, img.dims())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let perturbed = perturbed_observation(obs, &blurred, &dense)?;
        let a = policy
            .act(&perturbed, instruction)
            .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source })?;
        a.squared_distance(&baseline)
    })
}

/// Per-pixel `Σ_k δ_k (1 − m_k) / (N (1 − p))` in f64, summed in ascending `k`.
pub fn accumulate_saliency(deltas: &[f64], batch: &MaskBatch) -> Result<Vec<f64>> {
    if deltas.len() != batch.len() {
        return Err(Error::dims(format!("{} deltas for {} masks", deltas.len(), batch.len())));
    }
    let (w, h) = batch.target;
    let mut acc = vec![0.0f64; w * h];
    for (k, &d) in deltas.iter().enumerate() {
        let dense = batch.dense(k)?;
        acc.par_iter_mut()
            .with_min_len(4096)
            .zip(dense.data().par_iter().with_min_len(4096))
            .for_each(|(a, &m)| *a += d * (1.0 - m as f64));
    }
    let denom = batch.len() as f64 * (1.0 - batch.p as f64);
    for a in acc.iter_mut() {
        *a /= denom;
    }
    Ok(acc)
}

/// Squared action deviation for every mask of one timestep. Queries may run
/// concurrently; the result is indexed by mask.
pub fn mask_deltas(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    baseline: &crate::iss::ActionVector,
    batches: &BTreeMap<String, MaskBatch>,
    blur_sigma: f32,
) -> Result<Vec<f64>> {
    let blurred = blurred_views(obs, blur_sigma)?;
    let n = batches.values().next().map(MaskBatch::len).unwrap_or(0);
    if batches.values().any(|b| b.len() != n) {
        return Err(Error::param("mask batches differ in length across views"));
    }
    let t = obs.timestep;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let dense = batches
                .iter()
                .map(|(v, b)| Ok((v.clone(), b.dense(k)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let perturbed = perturbed_observation(obs, &blurred, &dense)?;
            let a = policy
                .act(&perturbed, instruction)
                .map_err(|source| Error::Query { timestep: t, mask: Some(k), source })?;
            let d = a.squared_distance(baseline)?;
            if !d.is_finite() {
                return Err(Error::Poisoned { timestep: t, mask: k });
            }
            Ok(d)
        })
        .collect()
}

/// Seed of the mask batch used for `view_index`, at timestep `t` when masks
/// are resampled per timestep.
pub fn batch_seed(master_seed: u64, view_index: usize, t: Option<usize>) -> u64 {
    match t {
        None => derive_seed(master_seed, &[view_index as u64]),
        Some(t) => derive_seed(master_seed, &[view_index as u64, t as u64]),
    }
}

/// Mask batches for every view, keyed like the observation.
pub fn view_batches(
    obs: &MultiViewObservation,
    cfg: &IssConfig,
    master_seed: u64,
    t: Option<usize>,
) -> Result<BTreeMap<String, MaskBatch>> {
    obs.views
        .iter()
        .enumerate()
        .map(|(i, (name, img))| {
            let seed = batch_seed(master_seed, i, t);
            Ok((
                name.clone(),
                sample_mask_batch(cfg.n_masks, cfg.keep_prob, cfg.grid, img.dims(), seed)?,
            ))
        })
        .collect()
}

fn check_episode(episode: &[MultiViewObservation]) -> Result<()> {
    let first = episode.first().ok_or_else(|| Error::param("episode is empty"))?;
    let shape: Vec<_> = first.views.iter().map(|(n, v)| (n.clone(), v.dims())).collect();
    for obs in episode {
        let s: Vec<_> = obs.views.iter().map(|(n, v)| (n.clone(), v.dims())).collect();
        if s != shape {
            return Err(Error::dims(format!(
                "timestep {} has views {:?}, episode started with {:?}",
                obs.timestep, s, shape
            )));
        }
    }
    Ok(())
}

/// Saliency maps for a whole episode.
pub fn iss_stream(
    episode: &[MultiViewObservation],
    instruction: &str,
    policy: &PolicyHandle,
    cfg: &IssConfig,
    master_seed: u64,
) -> Result<SaliencyStream> {
    cfg.validate()?;
    check_episode(episode)?;
    let t_len = episode.len();
    let frames = computed_frames(t_len, cfg.stride);
    let shared = if cfg.resample_per_timestep {
        None
    } else {
        Some(view_batches(&episode[0], cfg, master_seed, None)?)
    };

    let mut maps: BTreeMap<String, Vec<ScalarField>> = episode[0]
        .views
        .iter()
        .map(|(n, v)| {
            let (w, h) = v.dims();
            Ok((n.clone(), vec![ScalarField::zeros(w, h)?; t_len]))
        })
        .collect::<Result<_>>()?;
    let mut undefined: BTreeMap<String, Vec<usize>> = maps.keys().map(|n| (n.clone(), Vec::new())).collect();
    let mut computed = vec![false; t_len];

    for &t in &frames {
        let obs = &episode[t - 1];
        let fresh;
        let batches = match &shared {
            Some(b) => b,
            None => {
                fresh = view_batches(obs, cfg, master_seed, Some(t))?;
                &fresh
            }
        };
        let baseline = policy
            .act(obs, instruction)
            .map_err(|source| Error::Query { timestep: t, mask: None, source })?;
        let deltas = mask_deltas(policy, obs, instruction, &baseline, batches, cfg.blur_sigma)?;
        for (view, batch) in batches {
            let acc = accumulate_saliency(&deltas, batch)?;
            let (w, h) = batch.target;
            maps.get_mut(view).expect("view present")[t - 1] =
                ScalarField::new(w, h, acc.into_iter().map(|v| v as f32).collect())?;
            let u = undefined.get_mut(view).expect("view present");
            u.extend(batch.never_dropped_cells());
            u.sort_unstable();
            u.dedup();
        }
        computed[t - 1] = true;
    }

    interpolate_stream(SaliencyStream {
        maps,
        computed,
        undefined_cells: undefined,
        config: cfg.clone(),
        master_seed,
    })
}

/// Fill every non-computed frame from its neighbours:
/// `t_prev = s ⌊(t − 1)/s⌋ + 1`, `t_next = min(t_prev + s, T)`,
/// `S_t = (1 − α) S_prev + α S_next` with `α = (t − t_prev)/(t_next − t_prev)`.
/// Computed frames are left untouched.
pub fn interpolate_stream(mut stream: SaliencyStream) -> Result<SaliencyStream> {
    let s = stream.config.stride.max(1);
    let t_len = stream.len();
    if t_len == 0 {
        return Ok(stream);
    }
    for &t in &computed_frames(t_len, s) {
        if !stream.computed[t - 1] {
            return Err(Error::param(format!("stream is missing computed frame {t}")));
        }
    }
    for frames in stream.maps.values_mut() {
        if frames.len() != t_len {
            return Err(Error::dims("stream views disagree on episode length"));
        }
        for t in 1..=t_len {
            if stream.computed[t - 1] {
                continue;
            }
            let t_prev = s * ((t - 1) / s) + 1;
            let t_next = (t_prev + s).min(t_len);
            let alpha = (t - t_prev) as f64 / (t_next - t_prev) as f64;
            let (a, b) = (&frames[t_prev - 1], &frames[t_next - 1]);
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let (x, y) = (x as f64, y as f64);
                    ((1.0 - alpha) * x + alpha * y).clamp(x.min(y), x.max(y)) as f32
                })
                .collect();
            frames[t - 1] = ScalarField::new(a.width(), a.height(), data)?;
        }
    }
    Ok(stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

/// `n_visual` visual tokens followed by textual tokens, each a row of `dim`
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    dim: usize,
    n_visual: usize,
    embeddings: Vec<f32>,
}

impl TokenSequence {
    pub fn new(dim: usize, n_visual: usize, embeddings: Vec<f32>) -> Result<Self> {
        if dim == 0 || embeddings.len() % dim != 0 {
            return Err(Error::dims(format!("{} values do not split into rows of {dim}", embeddings.len())));
        }
        if n_visual > embeddings.len() / dim {
            return Err(Error::param("more visual tokens than tokens"));
        }
        Ok(Self {
            dim,
            n_visual,
            embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_textual(&self) -> usize {
        self.len() - self.n_visual
    }

    /// Modality of 1-based token `i`.
    pub fn modality(&self, i: usize) -> Modality {
        if i <= self.n_visual {
            Modality::Visual
        } else {
            Modality::Textual
        }
    }

    /// Row of 1-based token `i`.
    pub fn token(&self, i: usize) -> &[f32] {
        &self.embeddings[(i - 1) * self.dim..i * self.dim]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }
}

/// Per-modality mean embeddings used as the "absent" value of a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEmbeddings {
    pub visual_mean: Vec<f32>,
    pub textual_mean: Vec<f32>,
    pub provenance: String,
}

impl MeanEmbeddings {
    /// Modality means over every token of every sequence in `corpus`.
    pub fn from_corpus(corpus: &[TokenSequence], provenance: &str) -> Result<Self> {
        let dim = corpus.first().ok_or_else(|| Error::param("empty corpus"))?.dim;
        let mut sums = [vec![0.0f64; dim], vec![0.0f64; dim]];
        let mut counts = [0usize; 2];
        for seq in corpus {
            if seq.dim != dim {
                return Err(Error::dims("corpus sequences differ in embedding width"));
            }
            for i in 1..=seq.len() {
                let m = (seq.modality(i) == Modality::Textual) as usize;
                counts[m] += 1;
                for (s, &v) in sums[m].iter_mut().zip(seq.token(i)) {
                    *s += v as f64;
                }
            }
        }
        let mean = |m: usize| -> Vec<f32> {
            sums[m].iter().map(|&s| (s / counts[m].max(1) as f64) as f32).collect()
        };
        Ok(Self {
            visual_mean: mean(0),
            textual_mean: mean(1),
            provenance: provenance.to_string(),
        })
    }
}

/// Replace 1-based token `i` with its modality mean. Every other row is
/// copied bit for bit.
pub fn mean_ablate_token(seq: &TokenSequence, i: usize, means: &MeanEmbeddings) -> Result<TokenSequence> {
    if i == 0 || i > seq.len() {
        return Err(Error::param(format!("token index {i} outside 1..={}", seq.len())));
    }
    if means.visual_mean.len() != seq.dim || means.textual_mean.len() != seq.dim {
        return Err(Error::dims(format!(
            "mean embeddings of width {}/{} for sequence width {}",
            means.visual_mean.len(),
            means.textual_mean.len(),
            seq.dim
        )));
    }
    let mean = match seq.modality(i) {
        Modality::Visual => &means.visual_mean,
        Modality::Textual => &means.textual_mean,
    };
    let mut out = seq.clone();
    out.embeddings[(i - 1) * seq.dim..i * seq.dim].copy_from_slice(mean);
    Ok(out)
}

/// Squared action deviation caused by mean-ablating each token in turn,
/// indexed from 0 for token 1.
pub fn token_ablation_scores<F>(seq: &TokenSequence, means: &MeanEmbeddings, policy: F) -> Result<Vec<f64>>
where
    F: Fn(&TokenSequence) -> Result<ActionVector>,
{
    let clean = policy(seq)?;
    (1..=seq.len())
        .map(|i| policy(&mean_ablate_token(seq, i, means)?)?.squared_distance(&clean))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream_with(frames: Vec<ScalarField>, computed: Vec<bool>, stride: usize) -> SaliencyStream {
        SaliencyStream {
            maps: BTreeMap::from([("front".to_string(), frames)]),
            computed,
            undefined_cells: BTreeMap::new(),
            config: IssConfig {
                stride,
                ..IssConfig::default()
            },
            master_seed: 0,
        }
    }

    #[test]
    fn action_vector_shapes() {
        let a = ActionVector::chunked(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.shape(), (3, 2));
        assert_eq!(a.values(), &[1.0, 2.0]);
        assert!(ActionVector::chunked(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(ActionVector::single(vec![f32::NAN]).is_err());
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "[[1.0,2.0],[3.0,4.0],[5.0,6.0]]");
        assert_eq!(serde_json::from_str::<ActionVector>(&json).unwrap(), a);
    }

    #[test]
    fn chunked_deviation_sums_every_step() {
        let a = ActionVector::chunked(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = ActionVector::chunked(vec![vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(a.squared_distance(&b).unwrap(), 5.0);
    }

    #[test]
    fn computed_frames_include_the_last() {
        assert_eq!(computed_frames(5, 4), vec![1, 5]);
        assert_eq!(computed_frames(6, 4), vec![1, 5, 6]);
        assert_eq!(computed_frames(9, 4), vec![1, 5, 9]);
        assert_eq!(computed_frames(3, 1), vec![1, 2, 3]);
        assert_eq!(computed_frames(1, 3), vec![1]);
    }

    #[test]
    fn estimator_hand_examples() {
        assert_eq!(iss_token_estimate(&[4.0, 2.0], &[0, 1], 0.5).unwrap(), 4.0);
        assert_eq!(iss_token_estimate(&[4.0, 2.0, 9.0], &[1, 1, 1], 0.3).unwrap(), 0.0);
        assert!(iss_token_estimate(&[1.0], &[0, 1], 0.3).is_err());
        assert!(iss_token_estimate(&[1.0], &[0], 1.0).is_err());
    }

    #[test]
    fn psi_exact_two_token_enumeration() {
        // losses indexed by (m0, m1): L(00)=1, L(10)=2, L(01)=3, L(11)=4
        let loss = |b: &[u8]| Ok([1.0, 2.0, 3.0, 4.0][(b[0] + 2 * b[1]) as usize]);
        let psi = psi_exact(2, 0.5, loss).unwrap();
        // token 0 dropped: masks 00 and 01, weight 0.25 each, normalized by 0.5
        assert_eq!(psi[0], (0.25 * 1.0 + 0.25 * 3.0) / 0.5);
        assert_eq!(psi[1], (0.25 * 1.0 + 0.25 * 2.0) / 0.5);
        assert!(psi_exact(17, 0.5, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn kl_closed_form() {
        let mu = |v: Vec<f32>| ActionVector::single(v).unwrap();
        let p = |m, s| GaussianPolicyParams { mean: m, sigma: s };
        let a = mu(vec![0.0; 8]);
        let mut e = vec![0.0; 8];
        e[0] = 1.0;
        assert_eq!(kl_isotropic_gaussian(&p(a.clone(), 1.0), &p(a.clone(), 1.0)).unwrap(), 0.0);
        assert_eq!(kl_isotropic_gaussian(&p(mu(e), 1.0), &p(a.clone(), 1.0)).unwrap(), 0.5);
        let err = kl_isotropic_gaussian(&p(a.clone(), 1.0), &p(a, 2.0)).unwrap_err();
        assert!(err.to_string().contains("homoscedastic"));
    }

    #[test]
    fn interpolation_stride_four() {
        let z = ScalarField::zeros(3, 2).unwrap();
        let one = ScalarField::constant(3, 2, 1.0).unwrap();
        let frames = vec![z.clone(), z.clone(), z.clone(), z, one];
        let s = interpolate_stream(stream_with(frames, vec![true, false, false, false, true], 4)).unwrap();
        let got: Vec<f32> = (1..=5).map(|t| s.map("front", t).unwrap().data()[0]).collect();
        assert_eq!(got, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn interpolation_is_identity_at_stride_one() {
        let frames: Vec<_> = (0..4).map(|i| ScalarField::constant(2, 2, i as f32 * 0.7).unwrap()).collect();
        let st = stream_with(frames, vec![true; 4], 1);
        assert_eq!(interpolate_stream(st.clone()).unwrap(), st);
    }

    #[test]
    fn interpolation_requires_endpoints() {
        let z = ScalarField::zeros(1, 1).unwrap();
        let st = stream_with(vec![z.clone(), z.clone(), z], vec![true, false, false], 2);
        assert!(interpolate_stream(st).is_err());
    }

    #[test]
    fn mean_ablation_replaces_one_row() {
        let seq = TokenSequence::new(2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let means = MeanEmbeddings {
            visual_mean: vec![9.0, 9.0],
            textual_mean: vec![-1.0, -1.0],
            provenance: "test".into(),
        };
        let a = mean_ablate_token(&seq, 2, &means).unwrap();
        assert_eq!(a.embeddings(), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
        let b = mean_ablate_token(&seq, 3, &means).unwrap();
        assert_eq!(b.embeddings(), &[1.0, 2.0, 3.0, 4.0, -1.0, -1.0]);
        assert_eq!(seq.embeddings(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(mean_ablate_token(&seq, 0, &means).is_err());
        assert!(mean_ablate_token(&seq, 4, &means).is_err());
    }

    #[test]
    fn corpus_means_split_by_modality() {
        let s1 = TokenSequence::new(1, 1, vec![2.0, 10.0]).unwrap();
        let s2 = TokenSequence::new(1, 1, vec![4.0, 20.0]).unwrap();
        let m = MeanEmbeddings::from_corpus(&[s1, s2], "two").unwrap();
        assert_eq!(m.visual_mean, vec![3.0]);
        assert_eq!(m.textual_mean, vec![15.0]);
    }
}
