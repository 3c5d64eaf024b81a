//! Procedural scenes with ground-truth scene graphs, and a simulated
//! detector that stands in for concept grounding.

mod dataset;
mod detector;
mod layout;
mod scene;
mod world;

pub use dataset::{
    build_dataset, dataset_stats, read_jsonl, reserve_zero_shot_types, write_jsonl, Dataset, DatasetHeader,
    DatasetStats, TripletType, HEADER_FILE, TEST_FILE, TRAIN_FILE,
};
pub use detector::{simulate_detector, Task};
pub use layout::{sample_layout, spatial_relation, SpatialRelation};
pub use scene::{generate_scene, EntityHypothesis, GtEdge, GtEntity, Scene};
pub use world::{class_prototype, zipf_weights, DetectorNoise, RuleTable, WorldConfig, WorldSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(
        "reserving {reserved} zero-shot types would leave no trainable triplet types (only {reachable} reachable)"
    )]
    EmptyRules { reserved: usize, reachable: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
