//! Shared fixtures for the benchmarks: a default world, a handful of
//! scenes and freshly initialized models.

use scenegraph::ggt::{GgtConfig, GgtModel};
use scenegraph::relation::{RelationConfig, RelationModel, SemanticEmbeddingTable};
use scenegraph::seed;
use scenegraph::synth::{generate_scene, Scene, WorldConfig, WorldSpec};

pub struct Fixture {
    pub spec: WorldSpec,
    pub scenes: Vec<Scene>,
    pub ggt: GgtModel,
    pub rel: RelationModel,
}

pub fn fixture(n_scenes: u64) -> Fixture {
    let spec = WorldSpec::build(WorldConfig::default()).expect("default world is valid");
    let scenes: Vec<Scene> = (0..n_scenes).map(|s| generate_scene(&spec, s)).collect();
    let ggt = GgtModel::new(
        GgtConfig::default(),
        spec.num_classes(),
        spec.feature_dim(),
        &mut seed::rng(1, "bench-ggt", &[]),
    )
    .expect("default decoder config is valid");
    let rc = RelationConfig::default();
    let table = SemanticEmbeddingTable::from_cooccurrence(
        &scenes,
        spec.num_classes(),
        spec.num_predicates(),
        rc.embedding_dim,
        1,
    );
    let rel =
        RelationModel::new(rc, spec.num_predicates(), spec.feature_dim(), &table, &mut seed::rng(1, "bench-rel", &[]))
            .expect("default relation config is valid");
    Fixture { spec, scenes, ggt, rel }
}

/// The scene with the most detection hypotheses.
pub fn largest_scene(f: &Fixture) -> &Scene {
    f.scenes.iter().max_by_key(|s| s.hypotheses.len()).expect("fixture has scenes")
}
