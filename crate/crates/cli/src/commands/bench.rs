use anyhow::Result;
use causal_probe::bench::{interleaved_latencies, linear_fit, single_query_latency};
use serde_json::json;

use crate::analysis::config_grid;
use crate::exit::validation;
use crate::run::RunContext;

/// Per-timestep latency of ISS against a single policy query, on the first
/// frame of the first episode. The single query is timed first.
pub fn run(ctx: &mut RunContext, n_list: &[usize], p_list: &[f32], rounds: usize) -> Result<()> {
    if n_list.is_empty() || p_list.is_empty() {
        return Err(validation("bench needs at least one N and one p"));
    }
    let base = ctx.manifest().iss.clone();
    let configs = config_grid(&base, n_list, p_list);
    for c in &configs {
        c.validate()?;
    }
    let policy = ctx.policy()?;
    let episodes = ctx.episodes()?;
    let ep = &episodes[0];
    let obs = &ep.data.frames[0];
    let instr = &ep.data.meta.instruction;

    let single = single_query_latency(&policy, obs, instr, 5)?;
    let lat = interleaved_latencies(&policy, obs, instr, &configs, ctx.seed, rounds)?;

    let path = ctx.out_path("bench.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["mode", "n", "p", "latency_s", "hz", "slowdown"])?;
    w.write_record(["single", "", "", &single.to_string(), &(1.0 / single).to_string(), "1"])?;
    for (c, l) in configs.iter().zip(&lat) {
        w.write_record([
            "iss",
            &c.n_masks.to_string(),
            &c.keep_prob.to_string(),
            &l.to_string(),
            &(1.0 / l).to_string(),
            &(l / single).to_string(),
        ])?;
    }
    w.flush()?;
    ctx.record(&path);

    let fits: Vec<_> = p_list
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
            let ys: Vec<f64> = (0..n_list.len()).map(|i| lat[i * p_list.len() + j]).collect();
            let fit = linear_fit(&xs, &ys);
            json!({
                "p": p,
                "slope_s_per_mask": fit.map(|f| f.slope),
                "intercept_s": fit.map(|f| f.intercept),
                "r2": fit.map(|f| f.r2),
            })
        })
        .collect();
    ctx.note("single_query_s", json!(single));
    ctx.note("rounds", json!(rounds));
    ctx.note("threads", json!(rayon::current_num_threads()));
    ctx.note("linear_fits", json!(fits));
    Ok(())
}
