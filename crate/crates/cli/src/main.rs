use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenegraph::experiment::{
    cmd_eval, cmd_report, cmd_sweep_topk, cmd_synth, cmd_train_ggt, cmd_train_rel, EdgeBudget, ExperimentConfig,
    ExperimentError, TrainOptions,
};
use scenegraph::synth::Task;

#[derive(Parser)]
#[command(name = "scenegraph", version, about = "Synthetic scene graph generation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (world and training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Edge budget(s): a count or `all`. Comma-separated for sweep-topk.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Vec<EdgeBudget>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test scenes.
    Synth,
    /// Train the interaction-graph decoder.
    TrainGgt(TrainArgs),
    /// Train the predicate classifier.
    TrainRel(TrainArgs),
    /// Evaluate one task on the test split.
    Eval {
        /// predcls, sgcls or sgdet
        #[arg(long, value_parser = parse_task)]
        task: Task,
    },
    /// Evaluate all configured tasks at several edge budgets.
    SweepTopk,
    /// Summarize stored results.
    Report,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from the saved checkpoint.
    #[arg(long)]
    resume: bool,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "predcls" => Ok(Task::PredCls),
        "sgcls" => Ok(Task::SgCls),
        "sgdet" => Ok(Task::SgDet),
        _ => Err(format!("unknown task {s:?}; expected predcls, sgcls or sgdet")),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_budget(k: &[EdgeBudget]) -> Result<Option<EdgeBudget>, ExperimentError> {
    match k {
        [] => Ok(None),
        [one] => Ok(Some(*one)),
        _ => Err(ExperimentError::Config("eval takes a single --k value".into())),
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let mut cfg = load_config(&cli.common)?;
    let force = cli.common.force;
    match cli.command {
        Command::Synth => {
            let s = cmd_synth(&cfg, force)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::TrainGgt(a) => {
            if let Some(e) = a.epochs {
                cfg.ggt.epochs = e;
            }
            let opts = TrainOptions { force, resume: a.resume, verbose: !a.quiet };
            let m = cmd_train_ggt(&cfg, opts)?;
            println!("decoder trained for {} epochs; checkpoint {}", m.epochs_completed, m.checkpoint_hash);
        }
        Command::TrainRel(a) => {
            if let Some(e) = a.epochs {
                cfg.relation.epochs = e;
            }
            let opts = TrainOptions { force, resume: a.resume, verbose: !a.quiet };
            let m = cmd_train_rel(&cfg, opts)?;
            println!("relation model trained for {} epochs; checkpoint {}", m.epochs_completed, m.checkpoint_hash);
        }
        Command::Eval { task } => {
            let r = cmd_eval(&cfg, task, single_budget(&cli.common.k)?)?;
            print!("{}", r.to_table());
        }
        Command::SweepTopk => {
            let ks = (!cli.common.k.is_empty()).then_some(cli.common.k.as_slice());
            cmd_sweep_topk(&cfg, ks)?;
            print!("{}", std::fs::read_to_string(cfg.layout().sweep_csv())?);
        }
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
