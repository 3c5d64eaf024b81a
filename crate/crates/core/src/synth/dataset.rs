use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layout::SpatialRelation;
use super::scene::{generate_scene, Scene};
use super::world::WorldSpec;
use super::SynthError;
use crate::seed;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const HEADER_FILE: &str = "dataset.json";
pub const FORMAT_VERSION: u32 = 1;

/// `(subject label, predicate, object label)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletType {
    pub subj: usize,
    pub predicate: usize,
    pub obj: usize,
}

/// Sidecar describing how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub world: WorldSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub zero_shot_fraction: f64,
    pub zero_shot_types: Vec<TripletType>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub zero_shot_types: BTreeSet<TripletType>,
    pub zero_shot_fraction: f64,
}

/// Triplet types that the rule table can ever produce.
fn reachable_types(spec: &WorldSpec) -> BTreeSet<TripletType> {
    let rules = &spec.relation_rules;
    let mut out = BTreeSet::new();
    for z in 0..rules.num_scene_types {
        for s in 0..rules.num_classes {
            for o in 0..rules.num_classes {
                for rel in SpatialRelation::ALL {
                    if rules.edge_probability(s, o, rel) <= 0.0 {
                        continue;
                    }
                    for (p, &w) in rules.predicate_distribution(z, s, o, rel).iter().enumerate() {
                        if w > 0.0 {
                            out.insert(TripletType { subj: s, predicate: p, obj: o });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Picks `round(fraction * C * P * C)` reachable triplet types to hold out.
pub fn reserve_zero_shot_types(spec: &WorldSpec, fraction: f64) -> Result<BTreeSet<TripletType>, SynthError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SynthError::InvalidSpec(format!("zero_shot_fraction must be in [0, 1), got {fraction}")));
    }
    let c = spec.num_classes();
    let total = c * spec.num_predicates() * c;
    let count = (fraction * total as f64).round() as usize;
    if count == 0 {
        return Ok(BTreeSet::new());
    }
    let reachable: Vec<TripletType> = reachable_types(spec).into_iter().collect();
    if count >= reachable.len() {
        return Err(SynthError::EmptyRules { reserved: count, reachable: reachable.len() });
    }
    let mut pool = reachable;
    pool.shuffle(&mut seed::rng(spec.config.seed, "zero-shot", &[]));
    Ok(pool.into_iter().take(count).collect())
}

/// Generates train/test splits. Training edges of a reserved type are
/// dropped; test edges of a reserved type are kept and flagged.
pub fn build_dataset(
    spec: &WorldSpec,
    n_train: usize,
    n_test: usize,
    zero_shot_fraction: f64,
) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let zs = reserve_zero_shot_types(spec, zero_shot_fraction)?;
    let is_zs = |scene: &Scene, e: &super::GtEdge| {
        zs.contains(&TripletType {
            subj: scene.gt_entities[e.subj].label,
            predicate: e.predicate,
            obj: scene.gt_entities[e.obj].label,
        })
    };
    let train = (0..n_train as u64)
        .map(|id| {
            let mut scene = generate_scene(spec, id);
            let keep: Vec<bool> = scene.gt_edges.iter().map(|e| !is_zs(&scene, e)).collect();
            let mut it = keep.iter();
            scene.gt_edges.retain(|_| *it.next().unwrap());
            scene
        })
        .collect();
    let test = (n_train as u64..(n_train + n_test) as u64)
        .map(|id| {
            let mut scene = generate_scene(spec, id);
            let flags: Vec<bool> = scene.gt_edges.iter().map(|e| is_zs(&scene, e)).collect();
            for (e, f) in scene.gt_edges.iter_mut().zip(flags) {
                e.zero_shot = f;
            }
            scene
        })
        .collect();
    Ok(Dataset { spec: spec.clone(), train, test, zero_shot_types: zs, zero_shot_fraction })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub predicate_histogram: Vec<usize>,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub zero_shot_edges: usize,
}

pub fn dataset_stats(scenes: &[Scene], num_predicates: usize) -> DatasetStats {
    let mut hist = vec![0; num_predicates];
    let mut nodes = 0;
    let mut edges = 0;
    let mut zs = 0;
    for s in scenes {
        nodes += s.gt_entities.len();
        edges += s.gt_edges.len();
        for e in &s.gt_edges {
            hist[e.predicate] += 1;
            zs += usize::from(e.zero_shot);
        }
    }
    let denom = scenes.len().max(1) as f64;
    DatasetStats {
        scenes: scenes.len(),
        predicate_histogram: hist,
        mean_nodes: nodes as f64 / denom,
        mean_edges: edges as f64 / denom,
        zero_shot_edges: zs,
    }
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            world: self.spec.clone(),
            n_train: self.train.len(),
            n_test: self.test.len(),
            zero_shot_fraction: self.zero_shot_fraction,
            zero_shot_types: self.zero_shot_types.iter().copied().collect(),
        }
    }

    /// Writes `train.jsonl`, `test.jsonl` and the `dataset.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        let header = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(dir.join(HEADER_FILE), header + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let header: DatasetHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(HEADER_FILE))?)?;
        if header.format_version != FORMAT_VERSION {
            return Err(SynthError::Format(format!("dataset format version {}", header.format_version)));
        }
        header.world.validate()?;
        let train = read_jsonl(&dir.join(TRAIN_FILE))?;
        let test = read_jsonl(&dir.join(TEST_FILE))?;
        if train.len() != header.n_train || test.len() != header.n_test {
            return Err(SynthError::Format("scene counts disagree with header".into()));
        }
        Ok(Self {
            spec: header.world,
            train,
            test,
            zero_shot_types: header.zero_shot_types.into_iter().collect(),
            zero_shot_fraction: header.zero_shot_fraction,
        })
    }

    pub fn train_triplet_types(&self) -> BTreeMap<TripletType, usize> {
        let mut out = BTreeMap::new();
        for s in &self.train {
            for e in &s.gt_edges {
                let t = TripletType {
                    subj: s.gt_entities[e.subj].label,
                    predicate: e.predicate,
                    obj: s.gt_entities[e.obj].label,
                };
                *out.entry(t).or_insert(0) += 1;
            }
        }
        out
    }
}

pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scene>, SynthError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| SynthError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        scene.check_invariants().map_err(|e| SynthError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(scene);
    }
    Ok(out)
}
