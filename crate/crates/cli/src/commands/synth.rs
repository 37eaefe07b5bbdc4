use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causal_probe::iss::IssConfig;
use causal_probe::policy::{SyntheticKind, SyntheticPolicySpec};
use causal_probe::rng::derive_seed;
use causal_probe::scene::{aligned_weights, SceneSpec};
use causal_probe::tensor::io::write_partition_pgm;
use serde::{Deserialize, Serialize};

use crate::connect::SynthPolicyFile;
use crate::exit::validation;
use crate::manifest::{EpisodeRef, RunManifest, Split};
use crate::store::{write_episode, EpisodeMeta};

fn default_episodes() -> usize {
    4
}

fn default_task() -> String {
    "synthetic".into()
}

fn default_run_id() -> String {
    "synthetic".into()
}

fn default_policy() -> SyntheticPolicySpec {
    let mut p = SyntheticPolicySpec::new(SyntheticKind::NuisanceMix);
    p.weights = aligned_weights(p.action_dim);
    p.eta = 0.5;
    p
}

/// What `synth` generates: episodes of one scene layout, the policy to probe
/// them with and a manifest tying the two together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// The last `unseen` episodes are tagged unseen.
    #[serde(default)]
    pub unseen: usize,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_policy")]
    pub policy: SyntheticPolicySpec,
    #[serde(default)]
    pub iss: IssConfig,
    #[serde(default = "default_run_id")]
    pub run_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Write the episodes, `partitions/<view>.pgm`, `policy.json` and
/// `manifest.json` under `out`. Episode `k` renders the scene with seed
/// `derive(scene.seed, k)` and records `k` as its task seed.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    if spec.episodes == 0 {
        return Err(validation("synth needs at least one episode"));
    }
    if spec.unseen > spec.episodes {
        return Err(validation("more unseen episodes than episodes"));
    }
    spec.scene.validate()?;
    spec.policy.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut refs = Vec::new();
    for k in 0..spec.episodes {
        let scene = SceneSpec {
            seed: derive_seed(spec.scene.seed, &[k as u64]),
            ..spec.scene.clone()
        };
        let ep = scene.render()?;
        let tag = if k >= spec.episodes - spec.unseen { Split::Unseen } else { Split::Seen };
        let meta = EpisodeMeta {
            t_len: scene.frames,
            instruction: ep.instruction.clone(),
            action_dim: spec.policy.action_dim,
            views: scene.views.clone(),
            actions: None,
            task: Some(spec.task.clone()),
            tag: Some(tag),
            seed: Some(k as u64),
        };
        let name = format!("episode_{k:03}");
        written.extend(write_episode(&out.join(&name), &ep, &meta)?);
        refs.push(EpisodeRef::Path(PathBuf::from(name)));
    }

    let part = spec.scene.partition()?;
    let mut partitions = BTreeMap::new();
    for v in &spec.scene.views {
        let rel = PathBuf::from(format!("partitions/{v}.pgm"));
        let p = out.join(&rel);
        std::fs::create_dir_all(p.parent().expect("has a parent"))?;
        write_partition_pgm(&part, &p)?;
        written.push(p);
        partitions.insert(v.clone(), rel);
    }
    let policy = SynthPolicyFile {
        spec: spec.policy.clone(),
        partitions,
    };
    let p = out.join("policy.json");
    std::fs::write(&p, serde_json::to_string_pretty(&policy)?)?;
    written.push(p);

    let manifest: RunManifest = serde_json::from_value(serde_json::json!({
        "run_id": spec.run_id,
        "episodes": refs,
        "policy": "synth:policy.json",
        "iss": spec.iss,
        "master_seed": spec.scene.seed,
    }))?;
    let p = out.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
    written.push(p);
    Ok(written)
}

pub fn run(spec_path: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    generate(&spec, out)
}
