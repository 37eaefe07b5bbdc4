use std::fs::File;

use anyhow::Result;
use causal_probe::iss::IssConfig;
use causal_probe::metrics::{evaluate_map, MetricsCsvWriter, MetricsRecord, SaliencyMethod};
use causal_probe::tensor::io::write_pfm;
use causal_probe::Error;
use serde_json::json;

use crate::analysis::episode_stream;
use crate::plot::overlay;
use crate::run::RunContext;

/// Saliency maps, overlays and per-frame metrics for every episode.
pub fn run(ctx: &mut RunContext) -> Result<()> {
    let policy = ctx.policy()?;
    let cfg = ctx.manifest().iss.clone();
    let k_list = ctx.manifest().k_list.clone();
    let run_id = ctx.manifest().run_id.clone();
    let episodes = ctx.episodes()?;

    let csv_path = ctx.out_path("iss/metrics.csv")?;
    let mut writer = MetricsCsvWriter::new(File::create(&csv_path)?)?;
    let mut undefined_metrics = Vec::new();
    let mut undefined_cells = serde_json::Map::new();
    let mut computed = serde_json::Map::new();

    for ep in &episodes {
        let stream = episode_stream(&policy, ep, &cfg)?;
        computed.insert(ep.name.clone(), json!(stream.computed_frames()));
        undefined_cells.insert(ep.name.clone(), json!(stream.undefined_cells));
        for (view, frames) in &stream.maps {
            for (i, map) in frames.iter().enumerate() {
                let t = i + 1;
                let pfm = ctx.out_path(format!("iss/{}/{view}/s_{t:04}.pfm", ep.name))?;
                write_pfm(map, &pfm)?;
                ctx.record(&pfm);
                let png = ctx.out_path(format!("iss/{}/{view}/overlay_{t:04}.png", ep.name))?;
                let frame = ep.data.frames[i].view(view).expect("stream views come from the episode");
                overlay(frame, map, 0.5).save(&png)?;
                ctx.record(&png);

                let Some(parts) = ep.data.partitions_at(t) else { continue };
                match evaluate_map(SaliencyMethod::Iss, map, &parts[view], &k_list) {
                    Ok(m) => {
                        for (k, nmr) in m.nmr_at {
                            writer.write(&MetricsRecord {
                                run_id: run_id.clone(),
                                episode: ep.name.clone(),
                                view: view.clone(),
                                t,
                                k,
                                nmr,
                                rho_act: m.rho_act,
                                rho_sup: m.rho_sup,
                                rho_nuis: m.rho_nuis,
                                delta_s: None,
                                delta_a: None,
                            })?;
                        }
                    }
                    Err(Error::Degenerate(why)) => {
                        undefined_metrics.push(json!({ "episode": ep.name, "view": view, "t": t, "reason": why }));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    writer.finish()?;
    ctx.record(&csv_path);

    let default = IssConfig::default();
    ctx.note(
        "operating_point",
        json!({
            "n_masks": cfg.n_masks,
            "keep_prob": cfg.keep_prob,
            "is_default": cfg.n_masks == default.n_masks && cfg.keep_prob == default.keep_prob,
        }),
    );
    ctx.note("computed_frames", computed.into());
    ctx.note("undefined_cells", undefined_cells.into());
    ctx.note("undefined_metrics", undefined_metrics.into());
    Ok(())
}
