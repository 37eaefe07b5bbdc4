//! Wall-clock cost of one saliency timestep and a least-squares line fit for
//! latency-vs-N reports.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::iss::{accumulate_saliency, mask_deltas, view_batches, IssConfig};
use crate::policy::PolicyHandle;
use crate::rng::derive_seed;
use crate::tensor::MultiViewObservation;

/// Fastest of `repeats` single clean queries, in seconds.
pub fn single_query_latency(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    repeats: usize,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        policy
            .act(obs, instruction)
            .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source })?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Fastest of `repeats` full timesteps: mask generation, the clean query,
/// every masked query, and the per-view reduction. Seconds.
pub fn timestep_latency(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    cfg: &IssConfig,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    cfg.validate()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let batches = view_batches(obs, cfg, seed, None)?;
        let baseline = policy
            .act(obs, instruction)
            .map_err(|source| Error::Query { timestep: obs.timestep, mask: None, source })?;
        let deltas = mask_deltas(policy, obs, instruction, &baseline, &batches, cfg.blur_sigma)?;
        for batch in batches.values() {
            std::hint::black_box(accumulate_saliency(&deltas, batch)?);
        }
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// [`timestep_latency`] for several configurations, measured round-robin:
/// every round times each configuration once, and the median per
/// configuration is reported. Interleaving spreads warm-up and machine drift
/// evenly; the median ignores the occasional unusually slow or fast run.
/// Round `r` draws its masks from `derive_seed(seed, [r])`.
pub fn interleaved_latencies(
    policy: &PolicyHandle,
    obs: &MultiViewObservation,
    instruction: &str,
    configs: &[IssConfig],
    seed: u64,
    rounds: usize,
) -> Result<Vec<f64>> {
    let mut samples = vec![Vec::new(); configs.len()];
    if let Some(first) = configs.first() {
        timestep_latency(policy, obs, instruction, first, seed, 1)?;
    }
    for r in 0..rounds.max(1) {
        let round_seed = derive_seed(seed, &[r as u64]);
        for (s, cfg) in samples.iter_mut().zip(configs) {
            s.push(timestep_latency(policy, obs, instruction, cfg, round_seed, 1)?);
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope x + intercept` with its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }
}
