use anyhow::Result;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{config_grid, interventional_mse, pooled, split_stats};
use crate::exit::validation;
use crate::manifest::Split;
use crate::run::RunContext;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub p: f32,
    pub seen_mse_mean: Option<f64>,
    pub seen_mse_std: Option<f64>,
    pub unseen_mse_mean: Option<f64>,
    pub unseen_mse_std: Option<f64>,
    pub avg_mse_mean: Option<f64>,
    pub avg_mse_std: Option<f64>,
}

/// Interventional action MSE over an `N × p` grid, split by seen and unseen
/// episodes. Rows are N-major.
pub fn run(ctx: &mut RunContext, n_list: &[usize], p_list: &[f32]) -> Result<()> {
    if n_list.is_empty() || p_list.is_empty() {
        return Err(validation("sweep needs at least one N and one p"));
    }
    let base = ctx.manifest().iss.clone();
    let grid = config_grid(&base, n_list, p_list);
    for cfg in &grid {
        cfg.validate()?;
    }
    let policy = ctx.policy()?;
    let episodes = ctx.episodes()?;

    let mut rows = Vec::with_capacity(grid.len());
    for cfg in &grid {
        let (mut seen, mut unseen) = (Vec::new(), Vec::new());
        for ep in &episodes {
            let mse = interventional_mse(&policy, ep, cfg)?;
            match ep.tag {
                Split::Seen => seen.push(mse),
                Split::Unseen => unseen.push(mse),
            }
        }
        let (sm, ss) = split_stats(&seen);
        let (um, us) = split_stats(&unseen);
        rows.push(SweepRow {
            n: cfg.n_masks,
            p: cfg.keep_prob,
            seen_mse_mean: sm,
            seen_mse_std: ss,
            unseen_mse_mean: um,
            unseen_mse_std: us,
            avg_mse_mean: pooled(sm, um),
            avg_mse_std: pooled(ss, us),
        });
    }

    let path = ctx.out_path("sweep.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    ctx.record(&path);

    let best = rows
        .iter()
        .filter_map(|r| r.avg_mse_mean.map(|m| (m, r)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(m, r)| json!({ "n": r.n, "p": r.p, "avg_mse_mean": m }));
    ctx.note("lowest_avg_mse", best.unwrap_or_default());
    Ok(())
}
