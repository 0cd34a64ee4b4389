// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model registry: per-model metadata used for scale buckets and cohorts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Registry of the 23-model primary corpus, shipped with the crate.
pub const BUILTIN_REGISTRY_JSON: &str = include_str!("../data/registry.json");

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed registry: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid registry entry {model_id}: {reason}")]
    Invalid { model_id: String, reason: String },
}

/// Attention architecture cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "GQA")]
    Gqa,
    Alternating,
    Other,
}

impl Cohort {
    pub fn label(self) -> &'static str {
        match self {
            Cohort::Mha => "MHA",
            Cohort::Gqa => "GQA",
            Cohort::Alternating => "Alternating",
            Cohort::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model_id: String,
    pub family: String,
    pub params: u64,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub cohort: Cohort,
    pub source: String,
}

/// Parameter-count bucket; 500M and 3B belong to the middle bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScaleBucket {
    #[serde(rename = "<500M")]
    Small,
    #[serde(rename = "500M-3B")]
    Medium,
    #[serde(rename = ">3B")]
    Large,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 3] = [ScaleBucket::Small, ScaleBucket::Medium, ScaleBucket::Large];

    pub fn of(params: u64) -> Self {
        if params < 500_000_000 {
            ScaleBucket::Small
        } else if params <= 3_000_000_000 {
            ScaleBucket::Medium
        } else {
            ScaleBucket::Large
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScaleBucket::Small => "<500M",
            ScaleBucket::Medium => "500M-3B",
            ScaleBucket::Large => ">3B",
        }
    }
}

pub fn parse_registry(text: &str) -> Result<Vec<ModelMeta>, RegistryError> {
    let models: Vec<ModelMeta> = serde_json::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for m in &models {
        let invalid = |reason: &str| RegistryError::Invalid {
            model_id: m.model_id.clone(),
            reason: reason.to_owned(),
        };
        if m.params == 0 {
            return Err(invalid("params must be positive"));
        }
        if m.model_id.is_empty() {
            return Err(invalid("empty model_id"));
        }
        if !seen.insert(m.model_id.as_str()) {
            return Err(invalid("duplicate model_id"));
        }
    }
    Ok(models)
}

pub fn builtin_registry() -> Vec<ModelMeta> {
    parse_registry(BUILTIN_REGISTRY_JSON).expect("bundled registry is valid")
}

pub fn load_registry(path: &Path) -> Result<Vec<ModelMeta>, RegistryError> {
    let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_registry(&text)
}
