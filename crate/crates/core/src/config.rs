//! Run configuration: one TOML document covering every stage.
//!
//! Unknown keys are rejected. A top-level `seed`, when present, derives the
//! seed of every component and overrides the per-component seeds.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::interstage::InterConfig;
use crate::intrastage::IntraConfig;
use crate::model::ModelConfig;

/// Number of smallest cross-camera distances below the threshold rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdRank {
    Count(usize),
    /// Must be `"auto"`: use the accumulated ID count.
    Named(String),
}

impl Default for ThresholdRank {
    fn default() -> Self {
        ThresholdRank::Named("auto".into())
    }
}

impl ThresholdRank {
    /// `None` means the accumulated ID count.
    pub fn count(&self) -> Option<usize> {
        match self {
            ThresholdRank::Count(s) => Some(*s),
            ThresholdRank::Named(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    pub s: ThresholdRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Seed of the query/gallery split.
    pub split_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { split_seed: 17 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub intra: IntraConfig,
    pub inter: InterConfig,
    pub association: AssociationConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every invariant violation across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.generator.violations();
        if self.model.hidden_dim == 0 || self.model.embed_dim == 0 {
            v.push("model dimensions must be positive".into());
        }
        v.extend(self.intra.violations());
        v.extend(self.inter.violations());
        match &self.association.s {
            ThresholdRank::Count(0) => v.push("association.s must be at least 1".into()),
            ThresholdRank::Named(n) if n != "auto" => {
                v.push(format!("association.s = {n:?}; expected an integer or \"auto\""))
            }
            _ => {}
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Copy with the master seed, if any, pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.generator.seed = s;
            c.model.init_seed = s.wrapping_add(1);
            c.intra.sampler.seed = s.wrapping_add(2);
            c.inter.sampler.seed = s.wrapping_add(3);
            c.evaluation.split_seed = s.wrapping_add(4);
        }
        c
    }
}
