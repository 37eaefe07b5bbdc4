use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::Result;
use causal_probe::iss::SaliencyStream;
use causal_probe::metrics::{mean, nmr};
use causal_probe::Error;
use serde::Deserialize;
use serde_json::json;

use crate::analysis::{correlation, episode_stream};
use crate::exit::{degenerate, validation};
use crate::run::{LoadedEpisode, RunContext};

pub type Key = (String, u64);

#[derive(Debug, Deserialize)]
struct SuccessRow {
    task: String,
    seed: u64,
    success_rate: f64,
}

pub fn read_success(path: &Path) -> Result<BTreeMap<Key, f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<SuccessRow>() {
        let row = row.map_err(|e| validation(format!("{}: {e}", path.display())))?;
        if !row.success_rate.is_finite() {
            return Err(validation(format!("success rate for {} seed {} is not finite", row.task, row.seed)));
        }
        if out.insert((row.task.clone(), row.seed), row.success_rate).is_some() {
            return Err(validation(format!("duplicate row for {} seed {}", row.task, row.seed)));
        }
    }
    Ok(out)
}

/// Frame-mean nmr@k over computed frames and views. Frames whose map is all
/// zero are skipped; `None` if every frame was.
pub fn episode_nmr(ep: &LoadedEpisode, stream: &SaliencyStream, k: f64) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for t in stream.computed_frames() {
        let parts = ep
            .data
            .partitions_at(t)
            .ok_or_else(|| validation(format!("episode {} has no partition masks", ep.name)))?;
        for (view, frames) in &stream.maps {
            match nmr(&frames[t - 1], &parts[view], k) {
                Ok(v) => vals.push(v),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(mean(&vals))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KRow {
    pub k: f64,
    pub r: std::result::Result<f64, String>,
}

/// Pearson r between nmr@k and success rate across `(task, seed)` keys, for
/// every k. The key sets must agree exactly.
pub fn correlate_table(
    nmr_by_key: &BTreeMap<Key, Vec<f64>>,
    success: &BTreeMap<Key, f64>,
    k_list: &[f64],
) -> Result<Vec<KRow>> {
    let a: BTreeSet<&Key> = nmr_by_key.keys().collect();
    let b: BTreeSet<&Key> = success.keys().collect();
    if a != b {
        let fmt = |s: Vec<&&Key>| s.iter().map(|(t, s)| format!("{t}/{s}")).collect::<Vec<_>>().join(", ");
        return Err(validation(format!(
            "episode keys and success table disagree; only in episodes: [{}], only in table: [{}]",
            fmt(a.difference(&b).collect()),
            fmt(b.difference(&a).collect())
        )));
    }
    let y: Vec<f64> = nmr_by_key.keys().map(|k| success[k]).collect();
    if y.iter().all(|v| *v == y[0]) {
        return Err(degenerate("success rate has zero variance across keys"));
    }
    let rows: Vec<KRow> = k_list
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let x: Vec<f64> = nmr_by_key.values().map(|v| v[i]).collect();
            KRow {
                k,
                r: correlation(&x, &y, "nmr", "success rate"),
            }
        })
        .collect();
    if rows.iter().all(|r| r.r.is_err()) {
        return Err(degenerate(format!(
            "correlation undefined at every k: {}",
            rows[0].r.as_ref().unwrap_err()
        )));
    }
    Ok(rows)
}

/// Most negative r, the k whose nuisance mass best predicts failure.
pub fn strongest_k(rows: &[KRow]) -> Option<&KRow> {
    rows.iter()
        .filter(|r| r.r.is_ok())
        .min_by(|a, b| a.r.as_ref().unwrap().total_cmp(b.r.as_ref().unwrap()))
}

pub fn run(ctx: &mut RunContext, success_csv: Option<&Path>) -> Result<()> {
    let path = match (success_csv, &ctx.manifest().success_csv) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => ctx.loaded.resolve(p),
        (None, None) => return Err(validation("correlate needs --success or success_csv in the manifest")),
    };
    let success = read_success(&path)?;
    let policy = ctx.policy()?;
    let cfg = ctx.manifest().iss.clone();
    let k_list = ctx.manifest().k_list.clone();
    let episodes = ctx.episodes()?;

    let mut grouped: BTreeMap<Key, Vec<Vec<f64>>> = BTreeMap::new();
    for ep in &episodes {
        let stream = episode_stream(&policy, ep, &cfg)?;
        let mut per_k = Vec::with_capacity(k_list.len());
        for &k in &k_list {
            let v = episode_nmr(ep, &stream, k)?
                .ok_or_else(|| degenerate(format!("every saliency map of episode {} is zero", ep.name)))?;
            per_k.push(v);
        }
        grouped.entry((ep.task.clone(), ep.task_seed)).or_default().push(per_k);
    }
    let nmr_by_key: BTreeMap<Key, Vec<f64>> = grouped
        .into_iter()
        .map(|(key, eps)| {
            let avg = (0..k_list.len())
                .map(|i| mean(&eps.iter().map(|e| e[i]).collect::<Vec<_>>()).unwrap_or(f64::NAN))
                .collect();
            (key, avg)
        })
        .collect();
    let rows = correlate_table(&nmr_by_key, &success, &k_list)?;

    let out = ctx.out_path("correlation.csv")?;
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["k", "pearson_r", "keys", "note"])?;
    for r in &rows {
        let (cell, note) = match &r.r {
            Ok(v) => (v.to_string(), String::new()),
            Err(why) => ("n/a".to_string(), why.clone()),
        };
        w.write_record([r.k.to_string(), cell, nmr_by_key.len().to_string(), note])?;
    }
    w.flush()?;
    ctx.record(&out);

    let out = ctx.out_path("correlation_points.csv")?;
    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["task".to_string(), "seed".to_string(), "success_rate".to_string()];
    header.extend(k_list.iter().map(|k| format!("nmr_at_{k}")));
    w.write_record(&header)?;
    for (key, v) in &nmr_by_key {
        let mut rec = vec![key.0.clone(), key.1.to_string(), success[key].to_string()];
        rec.extend(v.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    ctx.record(&out);

    if let Some(best) = strongest_k(&rows) {
        let r = *best.r.as_ref().unwrap();
        println!("strongest negative correlation at k = {}: r = {r:.4}", best.k);
        ctx.note("strongest_k", json!({ "k": best.k, "r": r }));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(t: &str, s: u64) -> Key {
        (t.to_string(), s)
    }

    #[test]
    fn perfectly_anticorrelated_table_gives_minus_one_everywhere() {
        let ks = [1.0, 5.0, 10.0];
        let mut nmr = BTreeMap::new();
        let mut success = BTreeMap::new();
        for i in 0..6u64 {
            let x = i as f64 / 10.0;
            nmr.insert(key("pick", i), vec![x, 2.0 * x + 0.1, 0.5 * x]);
            success.insert(key("pick", i), 1.0 - 3.0 * x);
        }
        let rows = correlate_table(&nmr, &success, &ks).unwrap();
        for r in &rows {
            assert!((r.r.as_ref().unwrap() + 1.0).abs() < 1e-12, "{r:?}");
        }
        assert!(strongest_k(&rows).is_some());
    }

    #[test]
    fn mismatched_keys_are_a_validation_error() {
        let nmr = BTreeMap::from([(key("a", 0), vec![0.1]), (key("a", 1), vec![0.2])]);
        let success = BTreeMap::from([(key("a", 0), 0.5), (key("b", 1), 0.7)]);
        let err = correlate_table(&nmr, &success, &[10.0]).unwrap_err();
        assert_eq!(crate::exit::classify(&err), crate::exit::VALIDATION);
        assert!(err.to_string().contains("a/1"));
    }

    #[test]
    fn constant_success_is_degenerate() {
        let nmr = BTreeMap::from([(key("a", 0), vec![0.1]), (key("a", 1), vec![0.2])]);
        let success = BTreeMap::from([(key("a", 0), 0.5), (key("a", 1), 0.5)]);
        let err = correlate_table(&nmr, &success, &[10.0]).unwrap_err();
        assert_eq!(crate::exit::classify(&err), crate::exit::DEGENERATE);
    }

    #[test]
    fn flat_nmr_at_one_k_is_reported_not_fatal() {
        let nmr = BTreeMap::from([(key("a", 0), vec![0.1, 0.3]), (key("a", 1), vec![0.2, 0.3])]);
        let success = BTreeMap::from([(key("a", 0), 0.9), (key("a", 1), 0.5)]);
        let rows = correlate_table(&nmr, &success, &[1.0, 5.0]).unwrap();
        assert!((rows[0].r.as_ref().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(rows[1].r, Err("zero variance in nmr".into()));
    }
}
