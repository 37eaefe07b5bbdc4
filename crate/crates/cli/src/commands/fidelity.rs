use std::collections::BTreeMap;

use anyhow::Result;
use causal_probe::metrics::SaliencyMethod;
use causal_probe::rng::derive_seed;
use serde_json::json;

use crate::analysis::{correlation, episode_shift, episode_stream, methods, perturb_episode};
use crate::exit::validation;
use crate::plot::{grouped_bars, scatter, Marker, Series, PALETTE};
use crate::run::RunContext;

/// Correlation between how much a perturbation moves the action and how much
/// it moves each method's maps. A faithful method's maps should change
/// exactly when the action does.
pub fn run(ctx: &mut RunContext, lambda: Option<f32>) -> Result<()> {
    let mut specs = ctx.manifest().perturbations.clone();
    if specs.is_empty() {
        return Err(validation("no perturbations configured"));
    }
    if let Some(l) = lambda {
        for s in &mut specs {
            s.lambda = l;
            s.validate()?;
        }
    }
    let policy = ctx.policy()?;
    let cfg = ctx.manifest().iss.clone();
    let episodes = ctx.episodes()?;
    let methods = methods(&policy, true);
    let clean: Vec<_> = episodes
        .iter()
        .map(|ep| episode_stream(&policy, ep, &cfg))
        .collect::<Result<_>>()?;

    let rows_path = ctx.out_path("fidelity.csv")?;
    let mut rows = csv::Writer::from_path(&rows_path)?;
    rows.write_record(["perturbation", "lambda", "episode", "method", "delta_a", "one_minus_delta_s"])?;
    let summary_path = ctx.out_path("fidelity_summary.csv")?;
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["perturbation", "method", "pearson_r", "episodes", "note"])?;

    let mut bars = Vec::new();
    let mut results = BTreeMap::new();
    for (pi, spec) in specs.iter().enumerate() {
        let name = spec.kind.as_str();
        let pert_seed = derive_seed(ctx.seed, &[2, pi as u64, spec.seed]);
        let mut xs = Vec::new();
        let mut ys: BTreeMap<SaliencyMethod, Vec<f64>> = BTreeMap::new();
        for (ep, stream) in episodes.iter().zip(&clean) {
            let perturbed = perturb_episode(ep, spec, derive_seed(pert_seed, &[ep.index as u64]))?;
            let random_seed = derive_seed(pert_seed, &[ep.index as u64, 1]);
            let shift = episode_shift(&policy, ep, &cfg, stream, &perturbed, &methods, random_seed)?;
            xs.push(shift.delta_a);
            for (m, s) in shift.delta_s {
                let y = 1.0 - s;
                rows.write_record([
                    name.to_string(),
                    spec.lambda.to_string(),
                    ep.name.clone(),
                    m.as_str().to_string(),
                    shift.delta_a.to_string(),
                    y.to_string(),
                ])?;
                ys.entry(m).or_default().push(y);
            }
        }

        let mut group = Vec::new();
        let mut per_method = BTreeMap::new();
        for &m in &methods {
            let y = &ys[&m];
            let (cell, note, value) = match correlation(&xs, y, "action change", "map change") {
                Ok(r) => (r.to_string(), String::new(), Some(r)),
                Err(why) => ("n/a".to_string(), why, None),
            };
            summary.write_record([name, m.as_str(), &cell, &xs.len().to_string(), &note])?;
            group.push(value);
            per_method.insert(m.as_str(), json!({ "r": value, "note": note }));
        }
        bars.push(group);
        results.insert(name, per_method);

        let series: Vec<Series> = methods
            .iter()
            .enumerate()
            .map(|(j, m)| Series {
                color: PALETTE[j % PALETTE.len()],
                marker: Marker::Dot,
                points: xs.iter().copied().zip(ys[m].iter().copied()).collect(),
            })
            .collect();
        let png = ctx.out_path(format!("fidelity_{name}.png"))?;
        scatter(&series, false, (480, 360)).save(&png)?;
        ctx.record(&png);
    }
    rows.flush()?;
    summary.flush()?;
    ctx.record(&rows_path);
    ctx.record(&summary_path);

    let png = ctx.out_path("fidelity_bars.png")?;
    grouped_bars(&bars, (480, 360)).save(&png)?;
    ctx.record(&png);
    ctx.note("methods", json!(methods.iter().map(|m| m.as_str()).collect::<Vec<_>>()));
    ctx.note("pearson", json!(results));
    Ok(())
}
