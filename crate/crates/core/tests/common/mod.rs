#![allow(dead_code)]

use unimatch::synthdata::{generate, GeneratorConfig, SplitData};
use unimatch::ModelConfig;

/// A few hundred records over a ~90-entity catalog.
pub fn tiny_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        class_counts: [60, 12, 6, 10],
        users: 60,
        records_per_domain: vec![80, 70, 90, 120],
        shards: 4,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_data(seed: u64) -> SplitData {
    let cfg = tiny_generator(seed);
    SplitData::from_dataset(generate(&cfg).unwrap(), &cfg).unwrap().0
}

/// Narrow layers so finite differences and full-catalog scoring stay cheap.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        user_buckets: 64,
        entity_buckets: 128,
        feature_buckets: 64,
        max_seq_len: 6,
        ffn_dim: 8,
        ad_hidden: vec![8],
        expert_layers: vec![16, 8],
        tower_hidden: vec![8],
        classifier_hidden: 8,
        projection_dim: 6,
        critic_hidden: vec![6],
        ..ModelConfig::default()
    }
}
