use std::collections::BTreeMap;

use anyhow::Result;
use causal_probe::interventions::{PerturbationKind, PerturbationSpec};
use causal_probe::metrics::{mean, SaliencyMethod};
use causal_probe::rng::derive_seed;
use serde_json::json;

use crate::analysis::{episode_shift, episode_stream, lowest_quantile, methods, perturb_episode};
use crate::plot::{scatter, Marker, Series, PALETTE};
use crate::run::RunContext;

/// Nuisance-only noise: how far each method's maps move (ΔS, cosine) against
/// how far the action moves (ΔA, MSE).
pub fn run(ctx: &mut RunContext, lambda: f32) -> Result<()> {
    let policy = ctx.policy()?;
    let cfg = ctx.manifest().iss.clone();
    let q = ctx.manifest().robustness_quantile;
    let spec = PerturbationSpec::new(PerturbationKind::Noise, lambda, 0);
    spec.validate()?;
    let episodes = ctx.episodes()?;
    let methods = methods(&policy, false);

    let mut shifts = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        let clean = episode_stream(&policy, ep, &cfg)?;
        let perturbed = perturb_episode(ep, &spec, derive_seed(ep.mask_seed, &[1]))?;
        shifts.push(episode_shift(&policy, ep, &cfg, &clean, &perturbed, &methods, 0)?);
    }
    let delta_a: Vec<f64> = shifts.iter().map(|s| s.delta_a).collect();
    let kept = lowest_quantile(&delta_a, q);

    let path = ctx.out_path("robustness.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["episode", "method", "delta_a", "delta_s", "kept"])?;
    for (i, (ep, s)) in episodes.iter().zip(&shifts).enumerate() {
        for (m, ds) in &s.delta_s {
            w.write_record([
                ep.name.clone(),
                m.as_str().to_string(),
                s.delta_a.to_string(),
                ds.to_string(),
                kept.contains(&i).to_string(),
            ])?;
        }
    }
    w.flush()?;
    ctx.record(&path);

    let mut pareto: BTreeMap<SaliencyMethod, (f64, f64)> = BTreeMap::new();
    let path = ctx.out_path("robustness_pareto.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "delta_a_mean", "delta_s_mean", "episodes"])?;
    for &m in &methods {
        let a: Vec<f64> = kept.iter().map(|&i| shifts[i].delta_a).collect();
        let s: Vec<f64> = kept.iter().map(|&i| shifts[i].delta_s[&m]).collect();
        let (am, sm) = (mean(&a).unwrap_or(f64::NAN), mean(&s).unwrap_or(f64::NAN));
        pareto.insert(m, (am, sm));
        w.write_record([m.as_str().to_string(), am.to_string(), sm.to_string(), kept.len().to_string()])?;
    }
    w.flush()?;
    ctx.record(&path);

    // Per-episode dots and one square per method at its mean; ΔA grows to
    // the left so the robust corner is top right.
    let mut series = Vec::new();
    for (j, &m) in methods.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        series.push(Series {
            color,
            marker: Marker::Dot,
            points: kept.iter().map(|&i| (shifts[i].delta_a, shifts[i].delta_s[&m])).collect(),
        });
        series.push(Series {
            color,
            marker: Marker::Square,
            points: vec![pareto[&m]],
        });
    }
    let png = ctx.out_path("robustness.png")?;
    scatter(&series, true, (480, 360)).save(&png)?;
    ctx.record(&png);

    ctx.note("lambda", json!(lambda));
    ctx.note("kept_episodes", json!(kept.iter().map(|&i| &episodes[i].name).collect::<Vec<_>>()));
    ctx.note(
        "pareto",
        json!(pareto
            .iter()
            .map(|(m, (a, s))| (m.as_str(), json!({ "delta_a": a, "delta_s": s })))
            .collect::<BTreeMap<_, _>>()),
    );
    Ok(())
}
