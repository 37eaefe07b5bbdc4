//! Episode-level computations shared by the commands.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use causal_probe::baselines::{attention_score, token_norm_score, tokens_to_heatmap};
use causal_probe::interventions::{apply_obs, PerturbationSpec};
use causal_probe::iss::{computed_frames, iss_stream, mask_deltas, view_batches, ActionVector, IssConfig, SaliencyStream};
use causal_probe::metrics::{action_mse, cosine_similarity, mean, pearson, std_dev, SaliencyMethod};
use causal_probe::policy::PolicyHandle;
use causal_probe::rng::{derive_seed, standard_normal_field};
use causal_probe::tensor::{MultiViewObservation, ScalarField};
use causal_probe::Error;

use crate::exit::validation;
use crate::run::LoadedEpisode;

/// `maps[view]` for one frame.
pub type FrameMaps = BTreeMap<String, ScalarField>;

pub fn episode_stream(policy: &PolicyHandle, ep: &LoadedEpisode, cfg: &IssConfig) -> Result<SaliencyStream> {
    iss_stream(&ep.data.frames, &ep.data.meta.instruction, policy, cfg, ep.mask_seed)
        .with_context(|| format!("episode {}", ep.name))
}

pub fn act(policy: &PolicyHandle, obs: &MultiViewObservation, instruction: &str) -> Result<ActionVector> {
    policy
        .act(obs, instruction)
        .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source }.into())
}

/// Mean interventional action MSE over the computed frames of one episode:
/// for every mask, the MSE between the masked and the clean action.
pub fn interventional_mse(policy: &PolicyHandle, ep: &LoadedEpisode, cfg: &IssConfig) -> Result<f64> {
    cfg.validate()?;
    let frames = &ep.data.frames;
    let instr = &ep.data.meta.instruction;
    let shared = if cfg.resample_per_timestep {
        None
    } else {
        Some(view_batches(&frames[0], cfg, ep.mask_seed, None)?)
    };
    let mut per_frame = Vec::new();
    for t in computed_frames(frames.len(), cfg.stride) {
        let obs = &frames[t - 1];
        let fresh;
        let batches = match &shared {
            Some(b) => b,
            None => {
                fresh = view_batches(obs, cfg, ep.mask_seed, Some(t))?;
                &fresh
            }
        };
        let baseline = act(policy, obs, instr)?;
        let deltas = mask_deltas(policy, obs, instr, &baseline, batches, cfg.blur_sigma)?;
        let values = baseline.as_slice().len() as f64;
        let mses: Vec<f64> = deltas.iter().map(|d| d / values).collect();
        per_frame.push(mean(&mses).unwrap_or(0.0));
    }
    Ok(mean(&per_frame).unwrap_or(0.0))
}

/// One config per `(N, p)` pair, N-major.
pub fn config_grid(base: &IssConfig, n_list: &[usize], p_list: &[f32]) -> Vec<IssConfig> {
    let mut out = Vec::with_capacity(n_list.len() * p_list.len());
    for &n in n_list {
        for &p in p_list {
            out.push(IssConfig {
                n_masks: n,
                keep_prob: p,
                ..base.clone()
            });
        }
    }
    out
}

/// Mean and population std of each split; `None` for an empty split.
pub fn split_stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    (mean(values), std_dev(values))
}

/// Average of the available split statistics.
pub fn pooled(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        (x, y) => x.or(y),
    }
}

/// Apply `spec` to every frame, reseeding per frame from `seed`.
pub fn perturb_episode(ep: &LoadedEpisode, spec: &PerturbationSpec, seed: u64) -> Result<Vec<MultiViewObservation>> {
    ep.data
        .frames
        .iter()
        .map(|obs| {
            let t = obs.timestep;
            let parts = ep
                .data
                .partitions_at(t)
                .ok_or_else(|| validation(format!("episode {} has no partition masks", ep.name)))?;
            let s = PerturbationSpec {
                seed: derive_seed(seed, &[t as u64]),
                ..spec.clone()
            };
            Ok(apply_obs(obs, parts, &s).with_context(|| format!("episode {} frame {t}", ep.name))?)
        })
        .collect()
}

/// Attention or token-norm heatmaps of one frame, one per view.
pub fn introspection_maps(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    method: SaliencyMethod,
) -> Result<FrameMaps> {
    let payload = policy
        .introspect(obs, instruction)
        .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source })?;
    let scores = match method {
        SaliencyMethod::Att => attention_score(&payload),
        SaliencyMethod::Norm => token_norm_score(&payload),
        _ => unreachable!("only attention and norm come from introspection"),
    };
    obs.views
        .iter()
        .map(|(v, img)| Ok((v.clone(), tokens_to_heatmap(&scores, &payload, v, img.dims())?)))
        .collect()
}

/// A map of |N(0, 1)| values, independent of the policy.
pub fn random_maps(obs: &MultiViewObservation, seed: u64) -> Result<FrameMaps> {
    obs.views
        .iter()
        .enumerate()
        .map(|(i, (v, img))| {
            let (w, h) = img.dims();
            let data = standard_normal_field(w * h, seed, i as u64).into_iter().map(f32::abs).collect();
            Ok((v.clone(), ScalarField::new(w, h, data)?))
        })
        .collect()
}

pub fn stream_frame(stream: &SaliencyStream, t: usize) -> FrameMaps {
    stream
        .maps
        .iter()
        .map(|(v, frames)| (v.clone(), frames[t - 1].clone()))
        .collect()
}

/// Mean cosine similarity over views.
pub fn frame_similarity(a: &FrameMaps, b: &FrameMaps) -> Result<f64> {
    let sims = a
        .iter()
        .map(|(v, m)| {
            let other = b.get(v).ok_or_else(|| validation(format!("view {v} missing from a map set")))?;
            Ok(cosine_similarity(m, other)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&sims).unwrap_or(f64::NAN))
}

/// Per-method `(ΔA, ΔS)` of one episode under a perturbation, averaged over
/// the computed frames.
pub struct Shift {
    pub delta_a: f64,
    pub delta_s: BTreeMap<SaliencyMethod, f64>,
}

/// Methods available for this policy, ISS first.
pub fn methods(policy: &PolicyHandle, with_random: bool) -> Vec<SaliencyMethod> {
    let mut m = vec![SaliencyMethod::Iss];
    if policy.session().introspection {
        m.extend([SaliencyMethod::Att, SaliencyMethod::Norm]);
    }
    if with_random {
        m.push(SaliencyMethod::Random);
    }
    m
}

/// Compare clean and perturbed frames of one episode. `random_seed` keys the
/// random baseline; clean and perturbed random maps are drawn independently.
pub fn episode_shift(
    policy: &PolicyHandle,
    ep: &LoadedEpisode,
    cfg: &IssConfig,
    clean_stream: &SaliencyStream,
    perturbed: &[MultiViewObservation],
    methods: &[SaliencyMethod],
    random_seed: u64,
) -> Result<Shift> {
    let instr = &ep.data.meta.instruction;
    let pert_stream = iss_stream(perturbed, instr, policy, cfg, ep.mask_seed)
        .with_context(|| format!("episode {} (perturbed)", ep.name))?;
    let mut da = Vec::new();
    let mut ds: BTreeMap<SaliencyMethod, Vec<f64>> = BTreeMap::new();
    for t in computed_frames(ep.data.frames.len(), cfg.stride) {
        let (clean, pert) = (&ep.data.frames[t - 1], &perturbed[t - 1]);
        da.push(action_mse(&act(policy, pert, instr)?, &act(policy, clean, instr)?)?);
        for &m in methods {
            let (a, b) = match m {
                SaliencyMethod::Iss => (stream_frame(clean_stream, t), stream_frame(&pert_stream, t)),
                SaliencyMethod::Random => (
                    random_maps(clean, derive_seed(random_seed, &[0, t as u64]))?,
                    random_maps(pert, derive_seed(random_seed, &[1, t as u64]))?,
                ),
                _ => (
                    introspection_maps(policy, clean, instr, m)?,
                    introspection_maps(policy, pert, instr, m)?,
                ),
            };
            let s = frame_similarity(&a, &b).with_context(|| format!("{} maps of episode {} frame {t}", m.as_str(), ep.name))?;
            ds.entry(m).or_default().push(s);
        }
    }
    Ok(Shift {
        delta_a: mean(&da).unwrap_or(0.0),
        delta_s: ds.into_iter().map(|(m, v)| (m, mean(&v).unwrap_or(f64::NAN))).collect(),
    })
}

/// Pearson r, or the reason it is undefined.
pub fn correlation(x: &[f64], y: &[f64], x_name: &str, y_name: &str) -> std::result::Result<f64, String> {
    match pearson(x, y) {
        Ok(r) => Ok(r),
        Err(Error::Degenerate(_)) => {
            let flat = |v: &[f64]| v.iter().all(|a| *a == v[0]);
            Err(if flat(x) {
                format!("zero variance in {x_name}")
            } else if flat(y) {
                format!("zero variance in {y_name}")
            } else {
                "zero variance".into()
            })
        }
        Err(e) => Err(e.to_string()),
    }
}

/// Indices of the `q` fraction of items with the smallest key, in input
/// order. At least one item is kept.
pub fn lowest_quantile(keys: &[f64], q: f64) -> Vec<usize> {
    let keep = ((keys.len() as f64 * q).ceil() as usize).clamp(1.min(keys.len()), keys.len());
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_keeps_the_smallest() {
        assert_eq!(lowest_quantile(&[3.0, 1.0, 2.0, 0.5], 0.5), vec![1, 3]);
        assert_eq!(lowest_quantile(&[3.0, 1.0], 1.0), vec![0, 1]);
        assert_eq!(lowest_quantile(&[3.0, 1.0, 2.0], 0.01), vec![1]);
        assert!(lowest_quantile(&[], 0.5).is_empty());
    }

    #[test]
    fn pooled_falls_back_to_the_present_split() {
        assert_eq!(pooled(Some(1.0), Some(3.0)), Some(2.0));
        assert_eq!(pooled(None, Some(3.0)), Some(3.0));
        assert_eq!(pooled(None, None), None);
        assert_eq!(split_stats(&[]), (None, None));
        assert_eq!(split_stats(&[1.0, 3.0]), (Some(2.0), Some(1.0)));
    }

    #[test]
    fn correlation_names_the_flat_side() {
        let r = correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], "x", "y").unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&[0.0, 0.0], &[1.0, 2.0], "action", "map"), Err("zero variance in action".into()));
        assert_eq!(correlation(&[0.0, 1.0], &[2.0, 2.0], "action", "map"), Err("zero variance in map".into()));
    }
}
