//! Resolving the `--policy` argument into a live policy handle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causal_probe::policy::{handshake, synth_policy, ClientOptions, Endpoint, PolicyHandle, SyntheticPolicySpec};
use causal_probe::tensor::io::read_partition_pgm;
use serde::{Deserialize, Serialize};

use crate::exit::validation;

/// A synthetic policy file: the policy spec plus one partition mask per view,
/// with paths relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPolicyFile {
    #[serde(flatten)]
    pub spec: SyntheticPolicySpec,
    pub partitions: BTreeMap<String, PathBuf>,
}

impl SynthPolicyFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read policy file {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| validation(format!("policy file {}: {e}", path.display())))
    }

    pub fn build(&self, base: &Path) -> Result<PolicyHandle> {
        let parts = self
            .partitions
            .iter()
            .map(|(view, p)| {
                let p = base.join(p);
                let part = read_partition_pgm(&p).with_context(|| format!("partition for view {view}: {}", p.display()))?;
                Ok((view.clone(), part))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(synth_policy(self.spec.clone(), parts)?)
    }
}

/// Open `spec`, one of `synth:<file>`, `stdio:<cmd>` or `tcp:<host:port>`.
/// Relative synthetic paths start at `base`.
pub fn connect(spec: &str, base: &Path) -> Result<PolicyHandle> {
    if let Some(file) = spec.strip_prefix("synth:") {
        let path = base.join(file);
        let f = SynthPolicyFile::load(&path)?;
        return f.build(path.parent().unwrap_or(Path::new(".")));
    }
    let endpoint = Endpoint::parse(spec).map_err(|e| validation(e.to_string()))?;
    handshake(&endpoint, &ClientOptions::default()).with_context(|| format!("connecting to {spec}"))
}
