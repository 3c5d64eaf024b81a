use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::{EdgeBudget, ExperimentConfig, RunManifest};
use super::{sha256_hex, ExperimentError};
use crate::eval::{run_task, MetricReport, PipelineOptions};
use crate::ggt::{prepare_examples, write_loss_csv, EpochLoss, GgtModel, GgtTrainer};
use crate::relation::{
    example_class_weights, gt_examples, sampled_examples, save_embedding_table, write_relation_csv, RelationEpoch,
    RelationModel, RelationTrainer, SemanticEmbeddingTable, TrainRegime,
};
use crate::synth::{
    build_dataset, dataset_stats, Dataset, DatasetStats, Task, WorldSpec, HEADER_FILE, TEST_FILE, TRAIN_FILE,
};
use crate::tensor::checkpoint::Checkpoint;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MANIFEST_FILE: &str = "manifest.json";
const LOSS_FILE: &str = "loss.csv";
const TABLE_FILE: &str = "semantic_table.bin";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Discard an existing checkpoint and start over.
    pub force: bool,
    /// Continue an existing run up to the configured epoch count.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub train: DatasetStats,
    pub test: DatasetStats,
    pub zero_shot_types: usize,
    pub dataset_hash: String,
}

/// One row of the edge-budget sweep. Graph accuracy is averaged over tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: EdgeBudget,
    pub mean_recall_100: Vec<(Task, Option<f64>)>,
    pub avg_mean_recall_100: Option<f64>,
    pub graph_acc_unconstrained: Option<f64>,
    pub graph_acc_constrained: Option<f64>,
}

/// Content hash over the three dataset files, each framed by name and length.
pub fn dataset_hash(dir: &Path) -> Result<String, ExperimentError> {
    let mut buf = Vec::new();
    for name in [HEADER_FILE, TRAIN_FILE, TEST_FILE] {
        let bytes = std::fs::read(dir.join(name))?;
        buf.extend_from_slice(format!("{name} {}\0", bytes.len()).as_bytes());
        buf.extend_from_slice(&bytes);
    }
    Ok(sha256_hex(&buf))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn cmd_synth(cfg: &ExperimentConfig, force: bool) -> Result<SynthSummary, ExperimentError> {
    cfg.validate()?;
    let layout = cfg.layout();
    let dir = layout.data_dir();
    if dir.join(HEADER_FILE).exists() && !force {
        return Err(ExperimentError::Config(format!(
            "{} already holds a dataset; pass --force to overwrite",
            dir.display()
        )));
    }
    let spec = WorldSpec::build(cfg.world.clone())?;
    let d = &cfg.dataset;
    let ds = build_dataset(&spec, d.n_train, d.n_test, d.zero_shot_fraction)?;
    ds.save(&dir)?;
    std::fs::write(layout.config_file(), cfg.to_toml_string())?;
    Ok(SynthSummary {
        train: dataset_stats(&ds.train, spec.num_predicates()),
        test: dataset_stats(&ds.test, spec.num_predicates()),
        zero_shot_types: ds.zero_shot_types.len(),
        dataset_hash: dataset_hash(&dir)?,
    })
}

/// Loads the run's dataset and checks it was generated from this config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String), ExperimentError> {
    let dir = cfg.layout().data_dir();
    if !dir.join(HEADER_FILE).exists() {
        return Err(ExperimentError::Data(format!("no dataset in {}; run synth first", dir.display())));
    }
    let ds = Dataset::load(&dir).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let d = &cfg.dataset;
    if ds.spec.config != cfg.world
        || ds.train.len() != d.n_train
        || ds.test.len() != d.n_test
        || ds.zero_shot_fraction != d.zero_shot_fraction
    {
        return Err(ExperimentError::Config(format!(
            "dataset in {} was generated from a different config; rerun synth with --force",
            dir.display()
        )));
    }
    let hash = dataset_hash(&dir)?;
    Ok((ds, hash))
}

pub fn read_manifest<L: DeserializeOwned>(path: &Path) -> Result<RunManifest<L>, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_checkpoint(dir: &Path, what: &str) -> Result<(Checkpoint, String), ExperimentError> {
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|_| ExperimentError::Data(format!("missing {what} checkpoint {}; train it first", path.display())))?;
    let ck = Checkpoint::read_from(&mut bytes.as_slice())?;
    Ok((ck, sha256_hex(&bytes)))
}

/// Decoder from the run's checkpoint and the checkpoint's content hash.
pub fn load_ggt(cfg: &ExperimentConfig) -> Result<(GgtModel, String), ExperimentError> {
    let (ck, hash) = read_checkpoint(&cfg.layout().ggt_dir(), "decoder")?;
    Ok((GgtTrainer::from_checkpoint(&ck)?.model, hash))
}

pub fn load_relation(cfg: &ExperimentConfig) -> Result<(RelationModel, String), ExperimentError> {
    let (ck, hash) = read_checkpoint(&cfg.layout().rel_dir(), "relation")?;
    Ok((RelationTrainer::from_checkpoint(&ck)?.model, hash))
}

/// State shared by both training commands: where a run starts and what it
/// must match to be resumed.
struct RunIdentity<'a> {
    dir: &'a Path,
    command: &'static str,
    config_hash: String,
    dataset_hash: String,
    upstream_hash: Option<String>,
    seed: u64,
}

impl RunIdentity<'_> {
    /// Checkpoint and log to continue from, or `None` for a fresh start.
    fn prior_state<L: DeserializeOwned>(
        &self,
        opts: TrainOptions,
    ) -> Result<Option<(Checkpoint, Vec<L>)>, ExperimentError> {
        let ck_path = self.dir.join(CHECKPOINT_FILE);
        if !ck_path.exists() || opts.force {
            return Ok(None);
        }
        if !opts.resume {
            return Err(ExperimentError::Config(format!(
                "{} exists; pass --resume to continue or --force to retrain",
                ck_path.display()
            )));
        }
        let m: RunManifest<L> = read_manifest(&self.dir.join(MANIFEST_FILE))?;
        let (ck, ck_hash) = read_checkpoint(self.dir, self.command)?;
        if m.config_hash != self.config_hash {
            return Err(ExperimentError::Config("config differs from the checkpointed run; cannot resume".into()));
        }
        if m.dataset_hash != self.dataset_hash || m.upstream_hash != self.upstream_hash {
            return Err(ExperimentError::Config(
                "dataset or upstream checkpoint changed since the checkpointed run".into(),
            ));
        }
        if m.checkpoint_hash != ck_hash {
            return Err(ExperimentError::Data("checkpoint does not match its manifest".into()));
        }
        let mut log = m.log;
        log.truncate(m.epochs_completed);
        Ok(Some((ck, log)))
    }

    fn save<L: Serialize + Clone>(
        &self,
        cfg: &ExperimentConfig,
        ck: &Checkpoint,
        epochs: usize,
        log: &[L],
    ) -> Result<RunManifest<L>, ExperimentError> {
        let bytes = ck.to_bytes();
        write_atomic(&self.dir.join(CHECKPOINT_FILE), &bytes)?;
        let m = RunManifest {
            command: self.command.to_string(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            upstream_hash: self.upstream_hash.clone(),
            seed: self.seed,
            epochs_completed: epochs,
            checkpoint_hash: sha256_hex(&bytes),
            config: cfg.clone(),
            log: log.to_vec(),
        };
        write_atomic(&self.dir.join(MANIFEST_FILE), (serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
        Ok(m)
    }
}

pub fn cmd_train_ggt(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<RunManifest<EpochLoss>, ExperimentError> {
    cfg.validate()?;
    let (ds, dataset_hash) = load_dataset(cfg)?;
    let dir = cfg.layout().ggt_dir();
    std::fs::create_dir_all(&dir)?;
    let id = RunIdentity {
        dir: &dir,
        command: "train-ggt",
        config_hash: cfg.ggt_hash(),
        dataset_hash,
        upstream_hash: None,
        seed: cfg.seeds.ggt,
    };
    let (mut trainer, mut log) = match id.prior_state::<EpochLoss>(opts)? {
        Some((ck, log)) => {
            let mut t = GgtTrainer::from_checkpoint(&ck)?;
            t.model.config.epochs = cfg.ggt.epochs;
            (t, log)
        }
        None => {
            (GgtTrainer::new(cfg.ggt.clone(), ds.spec.num_classes(), ds.spec.feature_dim(), cfg.seeds.ggt)?, Vec::new())
        }
    };
    let examples = prepare_examples(&ds.train, &ds.spec, cfg.ggt.train_task, cfg.ggt.max_nodes);
    let mut manifest = id.save(cfg, &trainer.checkpoint(), trainer.epoch, &log)?;
    while trainer.epoch < cfg.ggt.epochs {
        let e = trainer.train_epoch(&examples)?;
        if opts.verbose {
            eprintln!(
                "train-ggt epoch {:>3}  L_A {:.5}  L_S {:.5}  total {:.5}",
                e.epoch, e.adjacency, e.semantic, e.total
            );
        }
        log.push(e);
        manifest = id.save(cfg, &trainer.checkpoint(), trainer.epoch, &log)?;
    }
    write_loss_csv(&dir.join(LOSS_FILE), &log)?;
    Ok(manifest)
}

pub fn cmd_train_rel(
    cfg: &ExperimentConfig,
    opts: TrainOptions,
) -> Result<RunManifest<RelationEpoch>, ExperimentError> {
    cfg.validate()?;
    let (ds, dataset_hash) = load_dataset(cfg)?;
    let spec = &ds.spec;
    let rc = &cfg.relation;
    let (examples, upstream_hash) = match rc.regime {
        TrainRegime::GtGraphs => (gt_examples(&ds.train, spec, rc.train_task), None),
        TrainRegime::Sampled => {
            let (ggt, hash) = load_ggt(cfg)?;
            (sampled_examples(&ds.train, spec, &ggt, rc.sampled_top_k, cfg.eval.prior)?, Some(hash))
        }
    };
    let dir = cfg.layout().rel_dir();
    std::fs::create_dir_all(&dir)?;
    let id = RunIdentity {
        dir: &dir,
        command: "train-rel",
        config_hash: cfg.relation_hash(upstream_hash.as_deref()),
        dataset_hash,
        upstream_hash,
        seed: cfg.seeds.relation,
    };
    let (mut trainer, mut log) = match id.prior_state::<RelationEpoch>(opts)? {
        Some((ck, log)) => {
            let mut t = RelationTrainer::from_checkpoint(&ck)?;
            t.model.config.epochs = rc.epochs;
            (t, log)
        }
        None => {
            let table = SemanticEmbeddingTable::from_cooccurrence(
                &ds.train,
                spec.num_classes(),
                spec.num_predicates(),
                rc.embedding_dim,
                cfg.seeds.relation,
            );
            save_embedding_table(&dir.join(TABLE_FILE), &table)?;
            let outputs = spec.num_predicates() + usize::from(rc.has_background());
            let weights = example_class_weights(&examples, outputs)?;
            let t = RelationTrainer::new(
                rc.clone(),
                spec.num_predicates(),
                spec.feature_dim(),
                &table,
                weights,
                cfg.seeds.relation,
            )?;
            (t, Vec::new())
        }
    };
    let mut manifest = id.save(cfg, &trainer.checkpoint(), trainer.epoch, &log)?;
    while trainer.epoch < rc.epochs {
        let e = trainer.train_epoch(&examples)?;
        if opts.verbose {
            eprintln!("train-rel epoch {:>3}  loss {:.5}  acc {:.4}", e.epoch, e.loss, e.accuracy);
        }
        log.push(e);
        manifest = id.save(cfg, &trainer.checkpoint(), trainer.epoch, &log)?;
    }
    write_relation_csv(&dir.join(LOSS_FILE), &log)?;
    Ok(manifest)
}

fn check_models(spec: &WorldSpec, ggt: &GgtModel, rel: &RelationModel) -> Result<(), ExperimentError> {
    if ggt.num_classes != spec.num_classes() || ggt.feature_dim != spec.feature_dim() {
        return Err(ExperimentError::Data("decoder checkpoint does not fit this world".into()));
    }
    if rel.num_predicates != spec.num_predicates()
        || rel.feature_dim != spec.feature_dim()
        || rel.num_classes != spec.num_classes()
    {
        return Err(ExperimentError::Data("relation checkpoint does not fit this world".into()));
    }
    Ok(())
}

struct Evaluator {
    ds: Dataset,
    ggt: GgtModel,
    rel: RelationModel,
}

impl Evaluator {
    fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let (ds, _) = load_dataset(cfg)?;
        let (ggt, _) = load_ggt(cfg)?;
        let (rel, _) = load_relation(cfg)?;
        check_models(&ds.spec, &ggt, &rel)?;
        Ok(Self { ds, ggt, rel })
    }

    fn run(&self, task: Task, budget: EdgeBudget, cfg: &ExperimentConfig) -> Result<MetricReport, ExperimentError> {
        let opts = PipelineOptions { edge_budget: budget.as_limit(), prior: cfg.eval.prior };
        let zs: &BTreeSet<_> = &self.ds.zero_shot_types;
        Ok(run_task(&self.ds.test, &self.ds.spec, task, &self.ggt, &self.rel, zs, opts)?.0)
    }
}

/// Evaluates `task` on the test split and writes `eval/<task>.json` and
/// `eval/<task>.txt`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    task: Task,
    budget: Option<EdgeBudget>,
) -> Result<MetricReport, ExperimentError> {
    cfg.validate()?;
    let ev = Evaluator::load(cfg)?;
    let report = ev.run(task, budget.unwrap_or(cfg.eval.edge_budget), cfg)?;
    let dir = cfg.layout().eval_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.json", task.as_str())), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(dir.join(format!("{}.txt", task.as_str())), report.to_table())?;
    Ok(report)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Evaluates every task at each edge budget and writes `sweep/topk.csv`.
pub fn cmd_sweep_topk(
    cfg: &ExperimentConfig,
    budgets: Option<&[EdgeBudget]>,
) -> Result<Vec<SweepRow>, ExperimentError> {
    cfg.validate()?;
    let budgets = budgets.unwrap_or(&cfg.eval.sweep);
    if budgets.is_empty() {
        return Err(ExperimentError::Config("no edge budgets to sweep".into()));
    }
    let ev = Evaluator::load(cfg)?;
    let tasks = &cfg.eval.tasks;
    let mut rows = Vec::with_capacity(budgets.len());
    for &k in budgets {
        let reports = tasks.iter().map(|&t| ev.run(t, k, cfg)).collect::<Result<Vec<_>, _>>()?;
        rows.push(SweepRow {
            k,
            mean_recall_100: reports.iter().map(|r| (r.task, r.mr100)).collect(),
            avg_mean_recall_100: mean(reports.iter().map(|r| r.mr100)),
            graph_acc_unconstrained: mean(reports.iter().map(|r| r.graph_acc_unconstrained)),
            graph_acc_constrained: mean(reports.iter().map(|r| r.graph_acc_constrained)),
        });
    }
    let mut csv = String::from("K");
    for t in tasks {
        let _ = write!(csv, ",{}_mR@100", t.as_str());
    }
    csv.push_str(",avg_mR@100,graph_acc_unconstrained,graph_acc_constrained\n");
    for r in &rows {
        let _ = write!(csv, "{}", r.k);
        for (_, v) in &r.mean_recall_100 {
            let _ = write!(csv, ",{}", opt_cell(*v));
        }
        let _ = writeln!(
            csv,
            ",{},{},{}",
            opt_cell(r.avg_mean_recall_100),
            opt_cell(r.graph_acc_unconstrained),
            opt_cell(r.graph_acc_constrained)
        );
    }
    let path = cfg.layout().sweep_csv();
    std::fs::create_dir_all(path.parent().expect("sweep file has a parent"))?;
    std::fs::write(&path, csv)?;
    Ok(rows)
}

/// Collects the stored evaluation reports, training summaries and sweep
/// into `report.txt`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let layout = cfg.layout();
    let mut out = String::new();
    let _ = writeln!(out, "run {}", layout.root.display());
    let _ =
        writeln!(out, "graph accuracy is averaged per scene, then over scenes; denominator is ground-truth edges\n");
    if let Ok(m) = read_manifest::<EpochLoss>(&layout.ggt_dir().join(MANIFEST_FILE)) {
        let last = m.log.last().map_or_else(|| "-".into(), |e| format!("{:.5}", e.total));
        let _ = writeln!(out, "decoder: {} epochs, final loss {last}, seed {}", m.epochs_completed, m.seed);
    }
    if let Ok(m) = read_manifest::<RelationEpoch>(&layout.rel_dir().join(MANIFEST_FILE)) {
        let last = m.log.last().map_or_else(|| "-".into(), |e| format!("{:.5} (acc {:.4})", e.loss, e.accuracy));
        let _ = writeln!(out, "relation: {} epochs, final loss {last}, seed {}", m.epochs_completed, m.seed);
    }
    out.push('\n');
    let mut found = Vec::new();
    for &task in &cfg.eval.tasks {
        let path = layout.eval_dir().join(format!("{}.json", task.as_str()));
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let r: MetricReport = serde_json::from_str(&text)?;
        out.push_str(&r.to_table());
        out.push('\n');
        found.push(r);
    }
    if found.is_empty() {
        return Err(ExperimentError::Data(format!(
            "no evaluation reports under {}; run eval first",
            layout.eval_dir().display()
        )));
    }
    if let Some(avg) = mean(found.iter().map(|r| r.mr100)) {
        let _ = writeln!(out, "average mR@100 over {} tasks: {:.1}\n", found.len(), 100.0 * avg);
    }
    if let Ok(csv) = std::fs::read_to_string(layout.sweep_csv()) {
        out.push_str("edge budget sweep\n");
        out.push_str(&csv);
    }
    std::fs::write(layout.report_file(), &out)?;
    Ok(out)
}
