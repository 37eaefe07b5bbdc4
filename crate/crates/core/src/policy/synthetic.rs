//! In-process policies with known causal structure.
//!
//! A synthetic policy reads the mean intensity of each semantic region (pixels
//! of every view pooled, all channels) and maps those means linearly to an
//! action. Its exact sensitivity to each region is therefore known in closed
//! form, which is what the oracle tests compare against.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Policy, PolicyError, PolicyHandle, Session, TransportKind, PROTOCOL_VERSION};
use crate::baselines::IntrospectionPayload;
use crate::error::{Error, Result};
use crate::iss::{ActionVector, TokenSequence};
use crate::metrics::{Label, SemanticPartition};
use crate::rng::{derive_seed, keyed_rng, mix64};
use crate::tensor::MultiViewObservation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `a = bias + w_act r_act + w_sup r_sup + w_nuis r_nuis`.
    RegionMeanLinear,
    /// `a = bias + (1 − η)(w_act r_act + w_sup r_sup) + η w_nuis r_nuis`.
    NuisanceMix,
    /// `a = bias`, whatever the input.
    Constant,
}

/// Per-region coefficient vectors, one value per action component. An empty
/// vector means all zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights {
    #[serde(default)]
    pub act: Vec<f32>,
    #[serde(default)]
    pub sup: Vec<f32>,
    #[serde(default)]
    pub nuis: Vec<f32>,
}

impl RegionWeights {
    fn get(&self, label: Label) -> &[f32] {
        match label {
            Label::Act => &self.act,
            Label::Sup => &self.sup,
            Label::Nuis => &self.nuis,
        }
    }
}

fn default_action_dim() -> usize {
    8
}
fn default_chunk_len() -> usize {
    1
}
fn default_token_grid() -> usize {
    4
}
fn default_instruction() -> String {
    "synthetic task".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPolicySpec {
    pub kind: SyntheticKind,
    #[serde(default = "default_action_dim")]
    pub action_dim: usize,
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    #[serde(default)]
    pub weights: RegionWeights,
    /// Nuisance reliance for `nuisance_mix`.
    #[serde(default)]
    pub eta: f32,
    #[serde(default)]
    pub bias: Vec<f32>,
    /// Std of Gaussian noise added to every action value. The noise is keyed
    /// by the observation, so repeated queries on one input agree.
    #[serde(default)]
    pub noise_std: f32,
    #[serde(default)]
    pub seed: u64,
    /// Side of the square token grid fabricated per view for introspection.
    #[serde(default = "default_token_grid")]
    pub token_grid: usize,
    #[serde(default)]
    pub uniform_attention: bool,
    #[serde(default = "default_instruction")]
    pub instruction: String,
}

impl SyntheticPolicySpec {
    /// A spec of `kind` with every other field at its default.
    pub fn new(kind: SyntheticKind) -> Self {
        Self {
            kind,
            action_dim: default_action_dim(),
            chunk_len: default_chunk_len(),
            weights: RegionWeights::default(),
            eta: 0.0,
            bias: Vec::new(),
            noise_std: 0.0,
            seed: 0,
            token_grid: default_token_grid(),
            uniform_attention: false,
            instruction: default_instruction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.chunk_len == 0 {
            return Err(Error::param("action_dim and chunk_len must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::param(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        for (name, w) in [
            ("act", &self.weights.act),
            ("sup", &self.weights.sup),
            ("nuis", &self.weights.nuis),
            ("bias", &self.bias),
        ] {
            if !w.is_empty() && w.len() != self.action_dim {
                return Err(Error::param(format!(
                    "{name} has {} entries for action_dim {}",
                    w.len(),
                    self.action_dim
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(format!("{name} contains non-finite values")));
            }
        }
        if self.token_grid == 0 {
            return Err(Error::param("token_grid must be at least 1"));
        }
        Ok(())
    }

    /// Exact `∂a / ∂r_region` for every action component.
    pub fn sensitivity(&self, label: Label) -> Vec<f64> {
        let w = self.weights.get(label);
        let scale = match (self.kind, label) {
            (SyntheticKind::RegionMeanLinear, _) => 1.0,
            (SyntheticKind::NuisanceMix, Label::Nuis) => self.eta as f64,
            (SyntheticKind::NuisanceMix, _) => 1.0 - self.eta as f64,
            (SyntheticKind::Constant, _) => 0.0,
        };
        (0..self.action_dim)
            .map(|c| w.get(c).map_or(0.0, |&v| v as f64) * scale)
            .collect()
    }
}

/// A synthetic policy bound to one partition per view.
#[derive(Debug, Clone)]
pub struct SyntheticPolicy {
    spec: SyntheticPolicySpec,
    partitions: BTreeMap<String, SemanticPartition>,
    session: Session,
    sensitivity: [Vec<f64>; 3],
}

impl SyntheticPolicy {
    pub fn new(spec: SyntheticPolicySpec, partitions: BTreeMap<String, SemanticPartition>) -> Result<Self> {
        spec.validate()?;
        if partitions.is_empty() {
            return Err(Error::param("synthetic policy needs at least one view partition"));
        }
        let session = Session {
            protocol_version: PROTOCOL_VERSION,
            action_dim: spec.action_dim,
            chunk_len: spec.chunk_len,
            views: partitions.keys().cloned().collect(),
            introspection: true,
        };
        let sensitivity = Label::ALL.map(|l| spec.sensitivity(l));
        Ok(Self {
            spec,
            partitions,
            session,
            sensitivity,
        })
    }

    pub fn spec(&self) -> &SyntheticPolicySpec {
        &self.spec
    }

    pub fn partitions(&self) -> &BTreeMap<String, SemanticPartition> {
        &self.partitions
    }

    /// Exact sensitivity of each action component to `label`'s mean.
    pub fn sensitivity(&self, label: Label) -> &[f64] {
        &self.sensitivity[label as usize]
    }

    fn check_dims(&self, obs: &MultiViewObservation) -> std::result::Result<(), PolicyError> {
        for (name, img) in &obs.views {
            let part = self.partitions.get(name).ok_or_else(|| {
                PolicyError::InvalidRequest(format!("no partition for view {name}"))
            })?;
            if part.dims() != img.dims() {
                return Err(PolicyError::InvalidRequest(format!(
                    "view {name} is {:?}, its partition is {:?}",
                    img.dims(),
                    part.dims()
                )));
            }
        }
        Ok(())
    }

    /// Mean unit intensity of every region, pooled over views and channels.
    /// A region with no pixels reads as 0.
    pub fn region_means(&self, obs: &MultiViewObservation) -> std::result::Result<[f64; 3], PolicyError> {
        self.check_dims(obs)?;
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for (name, img) in &obs.views {
            let labels = self.partitions[name].labels();
            let c = img.channels();
            let px = img.unit_samples();
            for (i, &l) in labels.iter().enumerate() {
                let s: f64 = px[i * c..(i + 1) * c].iter().map(|&v| v as f64).sum();
                sums[l as usize] += s;
                counts[l as usize] += c;
            }
        }
        Ok([0, 1, 2].map(|r| if counts[r] == 0 { 0.0 } else { sums[r] / counts[r] as f64 }))
    }

    /// The noise-free action for given region means.
    pub fn action_from_means(&self, means: [f64; 3]) -> Vec<f64> {
        (0..self.spec.action_dim)
            .map(|c| {
                let b = self.spec.bias.get(c).map_or(0.0, |&v| v as f64);
                b + (0..3).map(|r| self.sensitivity[r][c] * means[r]).sum::<f64>()
            })
            .collect()
    }

    fn noise_key(obs: &MultiViewObservation) -> u64 {
        let mut h = mix64(obs.views.len() as u64);
        for (name, img) in &obs.views {
            for b in name.bytes() {
                h = mix64(h ^ b as u64);
            }
            for &v in img.unit_samples().iter() {
                h = mix64(h ^ v.to_bits() as u64);
            }
        }
        h
    }

    fn patch_bounds(n: usize, g: usize, i: usize) -> (usize, usize) {
        (i * n / g, (i + 1) * n / g)
    }
}

impl Policy for SyntheticPolicy {
    fn session(&self) -> &Session {
        &self.session
    }

    fn act(&self, obs: &MultiViewObservation, _instruction: &str) -> std::result::Result<ActionVector, PolicyError> {
        let means = self.region_means(obs)?;
        let base = self.action_from_means(means);
        let (h, d) = (self.spec.chunk_len, self.spec.action_dim);
        let mut data: Vec<f32> = (0..h).flat_map(|_| base.iter().map(|&v| v as f32)).collect();
        if self.spec.noise_std > 0.0 {
            let mut rng = keyed_rng(derive_seed(self.spec.seed, &[Self::noise_key(obs)]), 0);
            for v in data.iter_mut() {
                *v += self.spec.noise_std * rng.sample::<f32, _>(StandardNormal);
            }
        }
        ActionVector::from_flat(h, d, data).map_err(|e| PolicyError::Malformed(e.to_string()))
    }

    /// One special token followed by a `g × g` grid per view. Each spatial
    /// token embeds its patch mean, its analytic relevance, and its region
    /// fractions; attention is uniform or peaked on relevant patches.
    fn introspect(
        &self,
        obs: &MultiViewObservation,
        _instruction: &str,
    ) -> std::result::Result<IntrospectionPayload, PolicyError> {
        self.check_dims(obs)?;
        let g = self.spec.token_grid;
        let norms: Vec<f64> = self
            .sensitivity
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        const DIM: usize = 6;
        let mut emb: Vec<f32> = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut relevance = vec![0.0f64];
        let mut patch_means = vec![0.0f64];
        let mut spatial = BTreeMap::new();
        for (name, img) in &obs.views {
            let (w, h) = img.dims();
            if w < g || h < g {
                return Err(PolicyError::InvalidRequest(format!(
                    "view {name} ({w}x{h}) is smaller than the {g}x{g} token grid"
                )));
            }
            let labels = self.partitions[name].labels();
            let c = img.channels();
            let px = img.unit_samples();
            let mut idx = Vec::with_capacity(g * g);
            for gy in 0..g {
                for gx in 0..g {
                    let (x0, x1) = Self::patch_bounds(w, g, gx);
                    let (y0, y1) = Self::patch_bounds(h, g, gy);
                    let mut sum = 0.0f64;
                    let mut frac = [0.0f64; 3];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let i = y * w + x;
                            sum += px[i * c..(i + 1) * c].iter().map(|&v| v as f64).sum::<f64>();
                            frac[labels[i] as usize] += 1.0;
                        }
                    }
                    let n = ((x1 - x0) * (y1 - y0)) as f64;
                    let m = sum / (n * c as f64);
                    frac.iter_mut().for_each(|f| *f /= n);
                    let r: f64 = (0..3).map(|k| norms[k] * frac[k]).sum();
                    idx.push(relevance.len());
                    relevance.push(r);
                    patch_means.push(m);
                    emb.extend([m, r, frac[0], frac[1], frac[2], 1.0].map(|v| v as f32));
                }
            }
            spatial.insert(name.clone(), idx);
        }
        let n = relevance.len();
        let row: Vec<f32> = if self.spec.uniform_attention {
            vec![1.0 / n as f32; n]
        } else {
            let max_r = relevance.iter().cloned().fold(0.0, f64::max);
            let logits: Vec<f64> = relevance
                .iter()
                .zip(&patch_means)
                .map(|(&r, &m)| if max_r > 0.0 { 4.0 * r / max_r } else { 0.0 } + m)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| (v / z) as f32).collect()
        };
        let attention: Vec<f32> = (0..n).flat_map(|_| row.iter().copied()).collect();
        debug_assert_eq!(emb.len(), n * DIM);
        IntrospectionPayload::new(n, attention, DIM, emb, spatial).map_err(|e| PolicyError::Malformed(e.to_string()))
    }

    fn pipelining_depth(&self) -> usize {
        rayon::current_num_threads().max(1)
    }
}

/// An in-process handle around a synthetic policy.
pub fn synth_policy(spec: SyntheticPolicySpec, partitions: BTreeMap<String, SemanticPartition>) -> Result<PolicyHandle> {
    let policy = SyntheticPolicy::new(spec, partitions)?;
    Ok(PolicyHandle::new(TransportKind::Synthetic, Arc::new(policy)))
}

/// A policy over token sequences: `a = Σ_i c_i Σ_d x_{i,d}`, one action
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLinearPolicy {
    pub coeffs: Vec<f32>,
}

impl TokenLinearPolicy {
    pub fn act(&self, seq: &TokenSequence) -> Result<ActionVector> {
        if seq.len() != self.coeffs.len() {
            return Err(Error::dims(format!(
                "{} coefficients for {} tokens",
                self.coeffs.len(),
                seq.len()
            )));
        }
        let a: f64 = (1..=seq.len())
            .map(|i| self.coeffs[i - 1] as f64 * seq.token(i).iter().map(|&v| v as f64).sum::<f64>())
            .sum();
        ActionVector::single(vec![a as f32])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageTensor;

    fn halves(w: usize, h: usize) -> SemanticPartition {
        let labels = (0..w * h)
            .map(|i| if i % w < w / 2 { Label::Act } else { Label::Nuis })
            .collect();
        SemanticPartition::new(w, h, labels).unwrap()
    }

    fn unit(dim: usize, c: usize) -> Vec<f32> {
        (0..dim).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    fn policy(spec: SyntheticPolicySpec) -> PolicyHandle {
        synth_policy(spec, BTreeMap::from([("front".to_string(), halves(8, 4))])).unwrap()
    }

    fn obs(img: ImageTensor) -> MultiViewObservation {
        MultiViewObservation::single("front", img, 1).unwrap()
    }

    #[test]
    fn handshake_fields_come_from_the_spec() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.action_dim = 3;
        spec.chunk_len = 2;
        let h = policy(spec);
        assert_eq!(h.session().action_dim, 3);
        assert_eq!(h.session().chunk_len, 2);
        assert!(h.session().introspection);
        assert_eq!(h.transport(), TransportKind::Synthetic);
    }

    #[test]
    fn zero_image_gives_zero_action() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.weights.act = vec![1.0; 8];
        spec.weights.nuis = vec![-2.0; 8];
        let a = policy(spec).act(&obs(ImageTensor::filled(8, 4, 3, 0.0).unwrap()), "").unwrap();
        assert!(a.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn act_mean_drives_component_zero() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.weights.act = unit(8, 0);
        let h = policy(spec);
        let a = h.act(&obs(ImageTensor::filled(8, 4, 3, 0.5).unwrap()), "").unwrap();
        assert_eq!(a.values()[0], 0.5);
    }

    #[test]
    fn eta_extremes_isolate_regions() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::NuisanceMix);
        spec.weights.act = vec![1.0; 8];
        spec.weights.nuis = vec![1.0; 8];
        let base = ImageTensor::filled(8, 4, 1, 0.2).unwrap();
        let mut nuis_changed = base.as_f32().unwrap().to_vec();
        let mut act_changed = nuis_changed.clone();
        for i in 0..32 {
            if i % 8 >= 4 {
                nuis_changed[i] = 0.9;
            } else {
                act_changed[i] = 0.9;
            }
        }
        let nuis_changed = obs(ImageTensor::from_f32(8, 4, 1, nuis_changed).unwrap());
        let act_changed = obs(ImageTensor::from_f32(8, 4, 1, act_changed).unwrap());
        let clean = obs(base);

        spec.eta = 0.0;
        let h = policy(spec.clone());
        assert_eq!(h.act(&clean, "").unwrap(), h.act(&nuis_changed, "").unwrap());
        assert_ne!(h.act(&clean, "").unwrap(), h.act(&act_changed, "").unwrap());

        spec.eta = 1.0;
        let h = policy(spec.clone());
        assert_eq!(h.act(&clean, "").unwrap(), h.act(&act_changed, "").unwrap());

        spec.eta = 1.5;
        assert!(SyntheticPolicy::new(spec, BTreeMap::from([("front".to_string(), halves(8, 4))])).is_err());
    }

    #[test]
    fn constant_policy_ignores_blackout() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::Constant);
        spec.bias = (0..8).map(|i| i as f32).collect();
        let h = policy(spec);
        let a = h.act(&obs(ImageTensor::filled(8, 4, 3, 0.7).unwrap()), "").unwrap();
        let b = h.act(&obs(ImageTensor::filled(8, 4, 3, 0.0).unwrap()), "").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_is_keyed_by_observation() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::Constant);
        spec.noise_std = 0.1;
        let h = policy(spec);
        let o1 = obs(ImageTensor::filled(8, 4, 3, 0.7).unwrap());
        let o2 = obs(ImageTensor::filled(8, 4, 3, 0.6).unwrap());
        assert_eq!(h.act(&o1, "").unwrap(), h.act(&o1, "").unwrap());
        assert_ne!(h.act(&o1, "").unwrap(), h.act(&o2, "").unwrap());
    }

    #[test]
    fn view_mismatch_is_rejected() {
        let h = policy(SyntheticPolicySpec::new(SyntheticKind::Constant));
        let o = MultiViewObservation::single("wrist", ImageTensor::filled(8, 4, 3, 0.0).unwrap(), 1).unwrap();
        assert!(matches!(h.act(&o, ""), Err(PolicyError::InvalidRequest(_))));
    }

    #[test]
    fn uniform_introspection_is_stochastic() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.uniform_attention = true;
        spec.token_grid = 2;
        let p = policy(spec).introspect(&obs(ImageTensor::filled(8, 4, 3, 0.3).unwrap()), "").unwrap();
        assert_eq!(p.n_tokens(), 5);
        for row in p.attention().chunks_exact(5) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn three_views_of_sixteen_squared_tokens() {
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.weights.act = vec![1.0; 8];
        spec.token_grid = 16;
        let parts: BTreeMap<_, _> = ["front", "overhead", "wrist"]
            .iter()
            .map(|v| (v.to_string(), halves(32, 32)))
            .collect();
        let h = synth_policy(spec, parts).unwrap();
        let views = ["front", "overhead", "wrist"]
            .iter()
            .map(|v| (v.to_string(), ImageTensor::filled(32, 32, 3, 0.4).unwrap()))
            .collect();
        let p = h.introspect(&MultiViewObservation::new(views, 1).unwrap(), "").unwrap();
        assert_eq!(p.spatial_token_count(), 768);
        let mut all: Vec<usize> = p.spatial_token_map().values().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 768);
    }

    #[test]
    fn token_policy_is_linear_in_rows() {
        let pol = TokenLinearPolicy { coeffs: vec![2.0, -1.0] };
        let seq = TokenSequence::new(2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pol.act(&seq).unwrap().values(), &[2.0 * 3.0 - 7.0]);
    }
}
