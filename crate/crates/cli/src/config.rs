use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use itemcf::algorithms::AlgoConfig;
use itemcf::itemspace::{ItemMeasure, MeasureSpec};

use crate::Failure;

/// Where the item measure comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSource {
    /// Path to a measure spec JSON file.
    Path(PathBuf),
    Inline(MeasureSpec),
}

impl MeasureSource {
    pub fn load(&self) -> Result<ItemMeasure, Failure> {
        match self {
            MeasureSource::Path(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::data(format!("cannot read measure {}: {e}", path.display())))?;
                ItemMeasure::from_json(&text).map_err(|e| Failure::data(format!("measure {}: {e}", path.display())))
            }
            MeasureSource::Inline(spec) => ItemMeasure::from_spec(spec).map_err(|e| Failure::config(format!("measure: {e}"))),
        }
    }

    /// How trace manifests refer to the measure: a canonical path or the inline spec.
    pub fn describe(&self) -> String {
        match self {
            MeasureSource::Path(p) => std::fs::canonicalize(p).unwrap_or_else(|_| p.clone()).display().to_string(),
            MeasureSource::Inline(spec) => serde_json::to_string(spec).expect("spec serializes"),
        }
    }
}

fn default_bootstrap() -> usize {
    200
}

fn default_traces() -> bool {
    true
}

/// Everything a `simulate` run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub measure: MeasureSource,
    pub algo: AlgoConfig,
    /// Horizon `T`; each seed runs `T·N` steps.
    pub horizon: u64,
    pub seeds: Vec<u64>,
    /// ν used for the assumption check; defaults to the algorithm's ν.
    #[serde(default)]
    pub nu: Option<f64>,
    /// Steps between regret grid points; defaults to `N`.
    #[serde(default)]
    pub stride: Option<u64>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_traces")]
    pub write_traces: bool,
    /// Fail with exit code 4 when a like fraction leaves [ν, 2ν].
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.seeds.is_empty() {
            return Err(Failure::config("seeds: at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Failure::config("seeds: duplicates are not allowed"));
        }
        if self.horizon == 0 {
            return Err(Failure::config("horizon: must be at least 1"));
        }
        if self.stride == Some(0) {
            return Err(Failure::config("stride: must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn algo_nu(&self) -> Option<f64> {
        match &self.algo {
            AlgoConfig::ItemItem { nu, .. } | AlgoConfig::UserUser { nu, .. } => Some(*nu),
            _ => None,
        }
    }
}
