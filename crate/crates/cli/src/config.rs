//! The TOML configuration file.
//!
//! A file only needs the keys it changes: it is merged over the defaults
//! before being parsed, and keys that do not exist in the defaults are
//! rejected.

use std::path::Path;

use anyhow::{Context, Result};
use fusum::backbone::BackboneConfig;
use fusum::corpus::SyntheticSpec;
use fusum::pipeline::ProtocolConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    pub protocol: ProtocolConfig,
    pub fewshot: FewshotSection,
    pub analysis: AnalysisSection,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotSection {
    pub k: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub prune_ks: Vec<usize>,
    pub surpass_ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub backbone: BackboneConfig,
    pub cls_hidden: usize,
    pub max_tokens: usize,
    /// Seed of the random point the gradient is checked at.
    pub point_seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synthetic: SyntheticSpec::default(),
            protocol: ProtocolConfig::desk(8192),
            fewshot: FewshotSection {
                k: 100,
                seeds: vec![1, 2, 3],
            },
            analysis: AnalysisSection {
                prune_ks: vec![5, 10, 15],
                surpass_ks: vec![5, 10, 15],
            },
            gradcheck: GradcheckSection {
                backbone: BackboneConfig {
                    seed: 11,
                    ..BackboneConfig::tiny(50)
                },
                cls_hidden: 8,
                max_tokens: 16,
                point_seed: 5,
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text)?;
        let mut merged = toml::Value::try_from(Self::default())?;
        merge(&mut merged, over);
        Ok(merged.try_into()?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Makes `seed` the seed of every random component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        let p = &mut self.protocol;
        p.seed = seed;
        p.base.backbone.seed = seed;
        p.fusion.backbone.seed = seed;
        p.base_train.seed = seed;
        p.fusion_train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = CliConfig::from_toml("seed = 4\n[protocol.fusion]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.protocol.fusion.lambda, 0.5);
        assert_eq!(cfg.protocol.fusion.m_max, 15);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CliConfig::from_toml("sed = 4\n").is_err());
        assert!(CliConfig::from_toml("[protocol.fusion]\nlamda = 0.5\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = CliConfig::default();
        assert_eq!(CliConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
