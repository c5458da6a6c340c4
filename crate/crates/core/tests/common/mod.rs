#![allow(dead_code)]

pub mod hand;
pub mod oracle;

use fusum::backbone::BackboneConfig;
use fusum::fusion::{FusionConfig, FusionModel};

/// Tiny fusion model used by several integration tests.
pub fn tiny_fusion(seed: u64) -> FusionModel<f64> {
    let cfg = FusionConfig {
        max_source_tokens: 16,
        max_candidate_tokens: 16,
        max_target_tokens: 16,
        cls_hidden: 8,
        ..FusionConfig::new(BackboneConfig { seed, ..BackboneConfig::tiny(50) })
    };
    FusionModel::new(cfg).unwrap()
}
