use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layout::{sample_layout, spatial_relation, SpatialRelation};
use super::SynthError;
use crate::seed;

/// Noise knobs of the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorNoise {
    pub label_flip_prob: f64,
    /// Box jitter standard deviation as a fraction of box width/height.
    pub bbox_jitter_scale: f64,
    /// Expected false positives per ground-truth entity.
    pub false_positive_rate: f64,
    pub miss_rate: f64,
    pub confidence_noise: f64,
}

impl DetectorNoise {
    pub fn none() -> Self {
        Self {
            label_flip_prob: 0.0,
            bbox_jitter_scale: 0.0,
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            confidence_noise: 0.0,
        }
    }
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            label_flip_prob: 0.2,
            bbox_jitter_scale: 0.05,
            false_positive_rate: 0.15,
            miss_rate: 0.1,
            confidence_noise: 0.1,
        }
    }
}

/// User-facing parameters of a synthetic world; [`WorldSpec::build`]
/// materializes class prototypes and the relation rule table from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_entity_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub predicate_zipf_exponent: f64,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Latent scene contexts. Each owns a contiguous band of the entity-count
    /// range and its own predicate assignment.
    pub num_scene_types: usize,
    /// Fraction of (subject class, object class) pairs that interact.
    pub interaction_density: f64,
    pub active_edge_prob: f64,
    pub background_edge_prob: f64,
    /// Mass each rule puts on its dominant predicate; the remainder follows
    /// the Zipf marginal. 0 makes every rule equal to the marginal.
    pub rule_peakedness: f64,
    /// Standard deviation of the Gaussian noise added to entity features.
    pub feature_noise: f64,
    pub detector_noise: DetectorNoise,
    /// Hypotheses below this confidence are dropped by the detector.
    pub min_confidence: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_entity_classes: 10,
            num_predicates: 8,
            feature_dim: 32,
            predicate_zipf_exponent: 1.0,
            min_entities: 4,
            max_entities: 12,
            num_scene_types: 2,
            interaction_density: 0.35,
            active_edge_prob: 0.8,
            background_edge_prob: 0.02,
            rule_peakedness: 0.92,
            feature_noise: 1.0,
            detector_noise: DetectorNoise::default(),
            min_confidence: 0.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |what: &str| Err(SynthError::InvalidSpec(what.to_string()));
        if self.num_entity_classes == 0 || self.num_predicates == 0 {
            return bad("world needs at least one entity class and one predicate");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return bad("entity range must satisfy 1 <= min <= max");
        }
        if self.num_scene_types == 0 || self.num_scene_types > self.max_entities - self.min_entities + 1 {
            return bad("num_scene_types must be between 1 and the size of the entity range");
        }
        if !(self.predicate_zipf_exponent >= 0.0) || !self.predicate_zipf_exponent.is_finite() {
            return bad("predicate_zipf_exponent must be a nonnegative number");
        }
        if !(self.feature_noise >= 0.0) {
            return bad("feature_noise must be nonnegative");
        }
        let n = &self.detector_noise;
        let probs = [
            ("interaction_density", self.interaction_density),
            ("active_edge_prob", self.active_edge_prob),
            ("background_edge_prob", self.background_edge_prob),
            ("rule_peakedness", self.rule_peakedness),
            ("label_flip_prob", n.label_flip_prob),
            ("false_positive_rate", n.false_positive_rate),
            ("miss_rate", n.miss_rate),
            ("min_confidence", self.min_confidence),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidSpec(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(n.bbox_jitter_scale >= 0.0) || !(n.confidence_noise >= 0.0) {
            return bad("jitter and confidence noise must be nonnegative");
        }
        Ok(())
    }
}

/// Normalized `k^-s` weights for `k = 1..=n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Table of edge probabilities and predicate distributions indexed by
/// (scene type, subject class, object class, spatial relation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    pub num_classes: usize,
    pub num_predicates: usize,
    pub num_scene_types: usize,
    /// `[subj][obj][relation]`, flattened.
    pub edge_prob: Vec<f64>,
    /// `[scene_type][subj][obj][relation][predicate]`, flattened.
    pub predicate_dist: Vec<f64>,
    /// `[scene_type][subj][relation]` dominant predicate.
    pub dominant: Vec<usize>,
}

impl RuleTable {
    fn cell(&self, subj: usize, obj: usize, rel: SpatialRelation) -> usize {
        (subj * self.num_classes + obj) * SpatialRelation::COUNT + rel.index()
    }

    pub fn edge_probability(&self, subj: usize, obj: usize, rel: SpatialRelation) -> f64 {
        self.edge_prob[self.cell(subj, obj, rel)]
    }

    pub fn predicate_distribution(&self, scene_type: usize, subj: usize, obj: usize, rel: SpatialRelation) -> &[f64] {
        let cells = self.num_classes * self.num_classes * SpatialRelation::COUNT;
        let at = (scene_type * cells + self.cell(subj, obj, rel)) * self.num_predicates;
        &self.predicate_dist[at..at + self.num_predicates]
    }

    pub fn dominant_predicate(&self, scene_type: usize, subj: usize, rel: SpatialRelation) -> usize {
        self.dominant[(scene_type * self.num_classes + subj) * SpatialRelation::COUNT + rel.index()]
    }
}

/// A fully materialized synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    /// One prototype vector of `feature_dim` values per entity class.
    pub prototypes: Vec<Vec<f64>>,
    pub relation_rules: RuleTable,
}

impl WorldSpec {
    pub fn build(config: WorldConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let prototypes = (0..config.num_entity_classes).map(|c| class_prototype(&config, c)).collect();
        let relation_rules = build_rules(&config);
        Ok(Self { config, prototypes, relation_rules })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_entity_classes
    }

    pub fn num_predicates(&self) -> usize {
        self.config.num_predicates
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Entity-count band `[lo, hi]` owned by a scene type.
    pub fn entity_band(&self, scene_type: usize) -> (usize, usize) {
        let (lo, hi, t) = (self.config.min_entities, self.config.max_entities, self.config.num_scene_types);
        let span = hi - lo + 1;
        let start = lo + scene_type * span / t;
        let end = lo + (scene_type + 1) * span / t - 1;
        (start, end)
    }

    pub fn scene_type_for_count(&self, n: usize) -> Option<usize> {
        (0..self.config.num_scene_types).find(|&t| {
            let (a, b) = self.entity_band(t);
            (a..=b).contains(&n)
        })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.config.validate()?;
        let rules = &self.relation_rules;
        if self.prototypes.len() != self.num_classes()
            || self.prototypes.iter().any(|p| p.len() != self.feature_dim())
            || rules.num_classes != self.num_classes()
            || rules.num_predicates != self.num_predicates()
        {
            return Err(SynthError::InvalidSpec("materialized tables disagree with config".into()));
        }
        for row in rules.predicate_dist.chunks(rules.num_predicates) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(SynthError::InvalidSpec("predicate distribution row is not a distribution".into()));
            }
        }
        Ok(())
    }
}

/// Deterministic function of `(seed, class)`.
pub fn class_prototype(config: &WorldConfig, class: usize) -> Vec<f64> {
    let mut rng = seed::rng(config.seed, "prototype", &[class as u64]);
    (0..config.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn build_rules(config: &WorldConfig) -> RuleTable {
    let c = config.num_entity_classes;
    let p = config.num_predicates;
    let t = config.num_scene_types;
    let r = SpatialRelation::COUNT;
    let mut rng = seed::rng(config.seed, "rules", &[]);

    let mut edge_prob = vec![0.0; c * c * r];
    for s in 0..c {
        for o in 0..c {
            let active = rng.random::<f64>() < config.interaction_density;
            let q = if active { config.active_edge_prob } else { config.background_edge_prob };
            edge_prob[(s * c + o) * r..(s * c + o + 1) * r].fill(q);
        }
    }

    let relation_freq = estimate_relation_frequencies(config);
    let zipf = zipf_weights(p, config.predicate_zipf_exponent);

    // Expected edge mass of each (subject, relation) cell under uniform labels.
    let mut cell_mass = vec![0.0; c * r];
    for s in 0..c {
        for rel in 0..r {
            let q: f64 = (0..c).map(|o| edge_prob[(s * c + o) * r + rel]).sum::<f64>() / c as f64;
            cell_mass[s * r + rel] = relation_freq[rel] * q / c as f64;
        }
    }
    let total_mass: f64 = cell_mass.iter().sum();

    // Each scene type packs the cells onto predicates greedily in its own
    // random order, filling the largest Zipf deficit first.
    let mut dominant = vec![0; t * c * r];
    for z in 0..t {
        let mut order: Vec<usize> = (0..c * r).collect();
        order.shuffle(&mut rng);
        let mut filled = vec![0.0; p];
        for cell in order {
            let (best, _) = (0..p)
                .map(|k| (k, zipf[k] * total_mass - filled[k]))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            filled[best] += cell_mass[cell];
            dominant[z * c * r + cell] = best;
        }
    }

    let alpha = config.rule_peakedness;
    let mut predicate_dist = Vec::with_capacity(t * c * c * r * p);
    for z in 0..t {
        for s in 0..c {
            for _o in 0..c {
                for rel in 0..r {
                    let d = dominant[(z * c + s) * r + rel];
                    predicate_dist.extend((0..p).map(|k| {
                        let peak = if k == d { alpha } else { 0.0 };
                        peak + (1.0 - alpha) * zipf[k]
                    }));
                }
            }
        }
    }
    // Renormalize away rounding so rows sum to 1 within 1e-12.
    for row in predicate_dist.chunks_mut(p) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }

    RuleTable { num_classes: c, num_predicates: p, num_scene_types: t, edge_prob, predicate_dist, dominant }
}

/// Monte Carlo frequency of each spatial relation over ordered entity pairs.
fn estimate_relation_frequencies(config: &WorldConfig) -> [f64; SpatialRelation::COUNT] {
    let mut rng = seed::rng(config.seed, "relation-freq", &[]);
    let mut counts = [0.0; SpatialRelation::COUNT];
    let mut pairs = 0.0_f64;
    for _ in 0..400 {
        let n = rng.random_range(config.min_entities..=config.max_entities);
        let boxes = sample_layout(&mut rng, n);
        for (i, a) in boxes.iter().enumerate() {
            for (j, b) in boxes.iter().enumerate() {
                if i == j {
                    continue;
                }
                pairs += 1.0;
                if let Some(rel) = spatial_relation(a, b) {
                    counts[rel.index()] += 1.0;
                }
            }
        }
    }
    counts.map(|c| c / pairs.max(1.0))
}
