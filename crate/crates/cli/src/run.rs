//! State shared by every manifest-driven command: resolved paths, the seed,
//! the episodes and a log of written files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causal_probe::policy::PolicyHandle;
use causal_probe::rng::derive_seed;
use serde_json::{json, Map, Value};

use crate::connect::connect;
use crate::exit::{classify, validation};
use crate::manifest::{LoadedManifest, Split};
use crate::store::{load_episode, StoredEpisode};

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub policy: Option<String>,
}

pub struct LoadedEpisode {
    pub index: usize,
    pub name: String,
    pub tag: Split,
    pub task: String,
    /// Seed used to key this episode in success tables.
    pub task_seed: u64,
    /// Master seed of this episode's mask batches.
    pub mask_seed: u64,
    pub data: StoredEpisode,
}

pub struct RunContext {
    pub loaded: LoadedManifest,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub policy_spec: String,
    outputs: Vec<PathBuf>,
    notes: Map<String, Value>,
}

impl RunContext {
    pub fn new(manifest_path: &Path, ov: &Overrides) -> Result<Self> {
        let loaded = LoadedManifest::load(manifest_path)?;
        let m = &loaded.manifest;
        let seed = ov.seed.unwrap_or(m.master_seed);
        let out_dir = match &ov.out {
            Some(p) => p.clone(),
            None => loaded.resolve(&m.output_dir),
        };
        let policy_spec = ov.policy.clone().unwrap_or_else(|| m.policy.clone());
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            loaded,
            seed,
            out_dir,
            policy_spec,
            outputs: Vec::new(),
            notes: Map::new(),
        })
    }

    pub fn manifest(&self) -> &crate::manifest::RunManifest {
        &self.loaded.manifest
    }

    pub fn policy(&self) -> Result<PolicyHandle> {
        connect(&self.policy_spec, &self.loaded.base_dir)
    }

    pub fn episodes(&self) -> Result<Vec<LoadedEpisode>> {
        let mut names = BTreeSet::new();
        self.loaded
            .manifest
            .episodes
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let dir = self.loaded.resolve(r.path());
                let data = load_episode(&dir)?;
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("episode_{index}"));
                if !names.insert(name.clone()) {
                    return Err(validation(format!("two episodes are named {name}")));
                }
                Ok(LoadedEpisode {
                    index,
                    tag: r.tag().or(data.meta.tag).unwrap_or_default(),
                    task: r
                        .task()
                        .map(str::to_string)
                        .or_else(|| data.meta.task.clone())
                        .unwrap_or_else(|| "default".into()),
                    task_seed: r.seed().or(data.meta.seed).unwrap_or(self.seed),
                    mask_seed: derive_seed(self.seed, &[index as u64]),
                    name,
                    data,
                })
            })
            .collect()
    }

    /// Path under the output directory, creating parents.
    pub fn out_path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.out_dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn record(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.notes.insert(key.to_string(), value);
    }

    /// Write `<command>_manifest.json` describing the run and its outcome,
    /// then hand `result` back.
    pub fn finish(self, command: &str, result: Result<()>) -> Result<()> {
        let rel: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(&self.out_dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        let status = match &result {
            Ok(()) => json!({ "state": "ok", "exit_code": 0 }),
            Err(e) => json!({ "state": "failed", "exit_code": classify(e), "error": format!("{e:#}") }),
        };
        let doc = json!({
            "command": command,
            "run_id": self.loaded.manifest.run_id,
            "seed": self.seed,
            "policy": self.policy_spec,
            "config": self.loaded.manifest,
            "outputs": rel,
            "status": status,
            "notes": self.notes,
        });
        let path = self.out_dir.join(format!("{command}_manifest.json"));
        let written = serde_json::to_string_pretty(&doc)
            .map_err(anyhow::Error::from)
            .and_then(|s| std::fs::write(&path, s).map_err(anyhow::Error::from));
        match (result, written) {
            (Err(e), _) => Err(e),
            (Ok(()), Err(e)) => Err(e.context(format!("writing {}", path.display()))),
            (Ok(()), Ok(())) => Ok(()),
        }
    }
}
