use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{sha256_hex, ExperimentError};
use crate::ggt::GgtConfig;
use crate::ranking::PriorMode;
use crate::relation::{RelationConfig, TrainRegime};
use crate::synth::{Task, WorldConfig};

/// Edges kept after ranking: a count, or every sampled edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeBudget {
    Top(usize),
    All,
}

impl EdgeBudget {
    pub fn as_limit(self) -> usize {
        match self {
            Self::Top(k) => k,
            Self::All => usize::MAX,
        }
    }
}

impl fmt::Display for EdgeBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Top(k) => write!(f, "{k}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl FromStr for EdgeBudget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        s.parse().map(Self::Top).map_err(|_| format!("edge budget must be a count or \"all\", got {s:?}"))
    }
}

impl Serialize for EdgeBudget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Top(k) => s.serialize_u64(*k as u64),
            Self::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for EdgeBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(Self::Top(k as usize)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub zero_shot_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_test: 500, zero_shot_fraction: 0.1 }
    }
}

/// Training seeds. The world seed lives in `world.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub ggt: u64,
    pub relation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { ggt: 1, relation: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: Vec<Task>,
    pub edge_budget: EdgeBudget,
    pub sweep: Vec<EdgeBudget>,
    pub prior: PriorMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::PredCls, Task::SgCls, Task::SgDet],
            edge_budget: EdgeBudget::Top(250),
            sweep: [10, 100, 250, 500, 750].map(EdgeBudget::Top).into_iter().chain([EdgeBudget::All]).collect(),
            prior: PriorMode::Product,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub seeds: Seeds,
    pub ggt: GgtConfig,
    pub relation: RelationConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            seeds: Seeds::default(),
            ggt: GgtConfig::default(),
            relation: RelationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.world.validate()?;
        self.ggt.validate()?;
        self.relation.validate()?;
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.zero_shot_fraction) {
            return Err(ExperimentError::Config("zero_shot_fraction must be in [0, 1)".into()));
        }
        if d.n_train == 0 || d.n_test == 0 {
            return Err(ExperimentError::Config("n_train and n_test must be positive".into()));
        }
        if self.eval.tasks.is_empty() || self.eval.sweep.is_empty() {
            return Err(ExperimentError::Config("eval.tasks and eval.sweep must be non-empty".into()));
        }
        Ok(())
    }

    /// Every named seed set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.seeds = Seeds { ggt: seed, relation: seed };
        self
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.output_dir.clone() }
    }

    /// Identity of a decoder run; the epoch target is excluded so a run can
    /// be extended with `--resume`.
    pub fn ggt_hash(&self) -> String {
        let ggt = GgtConfig { epochs: 0, ..self.ggt.clone() };
        hash_json(&(&self.world, &self.dataset, &ggt, self.seeds.ggt))
    }

    /// Identity of a relation run, including the decoder it samples from
    /// when trained on sampled graphs.
    pub fn relation_hash(&self, upstream: Option<&str>) -> String {
        let rel = RelationConfig { epochs: 0, ..self.relation.clone() };
        let prior = (rel.regime == TrainRegime::Sampled).then_some(self.eval.prior);
        hash_json(&(&self.world, &self.dataset, &rel, self.seeds.relation, upstream, prior))
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("config serializes to JSON").as_bytes())
}

/// Where a run keeps its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn ggt_dir(&self) -> PathBuf {
        self.root.join("ggt")
    }
    pub fn rel_dir(&self) -> PathBuf {
        self.root.join("rel")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep").join("topk.csv")
    }
    pub fn report_file(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

/// Written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest<L> {
    pub command: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Hash of the decoder checkpoint a relation run sampled from.
    pub upstream_hash: Option<String>,
    pub seed: u64,
    pub epochs_completed: usize,
    pub checkpoint_hash: String,
    pub config: ExperimentConfig,
    pub log: Vec<L>,
}
