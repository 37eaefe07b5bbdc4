//! Run manifests: which episodes to load, which policy to query and how.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causal_probe::interventions::{PerturbationKind, PerturbationSpec};
use causal_probe::iss::IssConfig;
use serde::{Deserialize, Serialize};

use crate::exit::validation;

/// Split label used by the generalization sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

/// An episode entry: a bare path, or a path with overrides for the split,
/// task and seed recorded in the episode itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpisodeRef {
    Path(PathBuf),
    Entry {
        path: PathBuf,
        #[serde(default)]
        tag: Option<Split>,
        #[serde(default)]
        task: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl EpisodeRef {
    pub fn path(&self) -> &Path {
        match self {
            EpisodeRef::Path(p) | EpisodeRef::Entry { path: p, .. } => p,
        }
    }

    pub fn tag(&self) -> Option<Split> {
        match self {
            EpisodeRef::Path(_) => None,
            EpisodeRef::Entry { tag, .. } => *tag,
        }
    }

    pub fn task(&self) -> Option<&str> {
        match self {
            EpisodeRef::Path(_) => None,
            EpisodeRef::Entry { task, .. } => task.as_deref(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            EpisodeRef::Path(_) => None,
            EpisodeRef::Entry { seed, .. } => *seed,
        }
    }
}

fn default_k_list() -> Vec<f64> {
    vec![1.0, 5.0, 10.0, 15.0, 20.0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_quantile() -> f64 {
    1.0
}

/// Texture, geometric and patch at full strength, all confined to the
/// nuisance region: the fidelity study edits nuisances only, so occlusion is
/// restricted too.
pub fn default_perturbations() -> Vec<PerturbationSpec> {
    [PerturbationKind::Texture, PerturbationKind::Geometric, PerturbationKind::Patch]
        .into_iter()
        .map(|k| PerturbationSpec {
            patch_region_restricted: true,
            ..PerturbationSpec::new(k, 1.0, 0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub episodes: Vec<EpisodeRef>,
    /// `stdio:<cmd>`, `tcp:<host:port>` or `synth:<policy.json>`.
    pub policy: String,
    #[serde(default)]
    pub iss: IssConfig,
    /// Perturbations for the fidelity command.
    #[serde(default = "default_perturbations")]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Fraction of episodes, ranked by action change, kept in robustness
    /// summaries.
    #[serde(default = "default_quantile")]
    pub robustness_quantile: f64,
    #[serde(default)]
    pub success_csv: Option<PathBuf>,
}

/// A manifest together with the directory its relative paths start from.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: RunManifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| validation(format!("manifest {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { manifest, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn episode_dirs(&self) -> Vec<PathBuf> {
        self.manifest.episodes.iter().map(|e| self.resolve(e.path())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.run_id.is_empty() {
            return Err(validation("run_id is empty"));
        }
        if m.episodes.is_empty() {
            return Err(validation("manifest lists no episodes"));
        }
        for dir in self.episode_dirs() {
            if !dir.join("episode.json").is_file() {
                return Err(validation(format!("episode {} has no episode.json", dir.display())));
            }
        }
        m.iss.validate().context("iss configuration")?;
        for p in &m.perturbations {
            p.validate().context("perturbation")?;
        }
        if m.k_list.is_empty() {
            return Err(validation("k_list is empty"));
        }
        if let Some(k) = m.k_list.iter().find(|k| !(**k > 0.0 && **k <= 100.0)) {
            return Err(validation(format!("k = {k} is outside (0, 100]")));
        }
        if !(m.robustness_quantile > 0.0 && m.robustness_quantile <= 1.0) {
            return Err(validation(format!(
                "robustness_quantile {} is outside (0, 1]",
                m.robustness_quantile
            )));
        }
        if let Some(p) = &m.success_csv {
            let p = self.resolve(p);
            if !p.is_file() {
                return Err(validation(format!("success table {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_optional_fields() {
        let m: RunManifest =
            serde_json::from_str(r#"{"run_id":"r","episodes":["a",{"path":"b","tag":"unseen"}],"policy":"synth:p.json"}"#)
                .unwrap();
        assert_eq!(m.k_list, default_k_list());
        assert_eq!(m.iss, IssConfig::default());
        assert_eq!(m.episodes[0].tag(), None);
        assert_eq!(m.episodes[1].tag(), Some(Split::Unseen));
        assert_eq!(m.perturbations.len(), 3);
        assert!(m.perturbations.iter().all(|p| p.patch_region_restricted));
    }

    #[test]
    fn validation_rejects_bad_k_and_missing_episodes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("ep")).unwrap();
        std::fs::write(dir.path().join("ep/episode.json"), "{}").unwrap();
        let write = |body: &str| {
            let p = dir.path().join("m.json");
            std::fs::write(&p, body).unwrap();
            LoadedManifest::load(&p)
        };
        assert!(write(r#"{"run_id":"r","episodes":["ep"],"policy":"synth:p.json"}"#).is_ok());
        let bad_k = write(r#"{"run_id":"r","episodes":["ep"],"policy":"x","k_list":[0]}"#).unwrap_err();
        assert_eq!(crate::exit::classify(&bad_k), crate::exit::VALIDATION);
        let missing = write(r#"{"run_id":"r","episodes":["nope"],"policy":"x"}"#).unwrap_err();
        assert_eq!(crate::exit::classify(&missing), crate::exit::VALIDATION);
    }
}
