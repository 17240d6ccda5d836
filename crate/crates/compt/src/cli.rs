//! The `compt` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use compt_core::analysis::{
    cross_task_eval, inclusion_study, isolation_study, lr_grid, WeightReport, DEFAULT_GRID_EPOCHS,
    DEFAULT_PRIVATE_LRS, ISOLATION_TEST_SIZE,
};
use compt_core::checkpoint::PromptCheckpoint;
use compt_core::pretrain::{certify_backbone, meta_train};
use compt_core::train::{run_seed_sweep, SweepReport};
use compt_core::{
    evaluate, train, BackboneParams, CompositionMethod, OptimizerKind, PromptPosition, SourceMask, Split,
    TrainConfig, WeightsMode,
};

use crate::data::{Dataset, WorldConfig};
use crate::error::{Error, Result};
use crate::files::{load_backbone, load_model, save_backbone, write_json, BackboneFile};
use crate::presets;
use crate::reports;

#[derive(Debug, Parser)]
#[command(name = "compt", version, about = "Multi-task soft-prompt composition on a frozen toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train and certify a frozen backbone for a dataset's world.
    PretrainBackbone(PretrainArgs),
    /// Generate a synthetic task family as JSON lines plus a manifest.
    GenTasks(GenTasksArgs),
    /// Train prompts, one run per seed, and write an aggregate report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one task, optionally with prompts masked.
    Eval(EvalArgs),
    /// Isolation study and router weight report of a checkpoint.
    Isolate(IsolateArgs),
    /// Evaluate one task's prompt on another task.
    CrossEval(CrossEvalArgs),
    /// Grid over private learning rates and epoch budgets.
    LrGrid(LrGridArgs),
    /// Compare base tasks trained with and without an extra task.
    IncludeStudy(IncludeArgs),
    /// Seed sweep over several numbers of source prompts.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = presets::FAMILY_SEED)]
    pub seed: u64,
    /// Rotation (radians) of each task's rule away from its group's base rule.
    #[arg(long, default_value_t = presets::SPREAD)]
    pub spread: f64,
    #[arg(long, default_value_t = presets::LATENT_DIM)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = presets::NUM_LABELS)]
    pub labels: usize,
    #[arg(long, default_value_t = presets::MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = presets::WORLD_SEED)]
    pub world_seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory; its rules are kept out of pretraining.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Output file for the backbone.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write the backbone even if certification fails.
    #[arg(long)]
    pub allow_uncertified: bool,
}

#[derive(Debug, Args)]
pub struct Inputs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value = "ssum", value_parser = parse_from_str::<CompositionMethod>)]
    pub method: CompositionMethod,
    #[arg(long, default_value_t = 2)]
    pub num_sources: usize,
    /// Rows per source prompt; defaults to 20, or 10 for MCAT.
    #[arg(long)]
    pub source_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub k_shot: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "learned", value_parser = parse_from_str::<WeightsMode>)]
    pub weights: WeightsMode,
    #[arg(long, default_value_t = 0.1)]
    pub lr_router: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_source: f64,
    #[arg(long, default_value_t = 0.02)]
    pub lr_private: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// `sgd` (default) or `adam`.
    #[arg(long, default_value = "sgd", value_parser = parse_optimizer)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value = "append", value_parser = parse_position)]
    pub position: PromptPosition,
    /// Comma-separated task ids; all dataset tasks when omitted.
    #[arg(long, value_delimiter = ',')]
    pub task_list: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Source prompts to keep; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub keep: Option<Vec<usize>>,
    /// Hide the task's private prompt.
    #[arg(long)]
    pub drop_private: bool,
}

#[derive(Debug, Args)]
pub struct IsolateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = ISOLATION_TEST_SIZE)]
    pub test_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossEvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt_of: String,
    #[arg(long)]
    pub eval_on: String,
    /// Label translation as `from:to` pairs, e.g. `0:1,1:0`.
    #[arg(long, value_delimiter = ',', value_parser = parse_label_pair)]
    pub label_map: Option<Vec<(usize, usize)>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LrGridArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',')]
    pub private_lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub epochs_list: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct IncludeArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub extra_task: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub num_sources_list: Vec<usize>,
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
    }
}

fn parse_position(s: &str) -> std::result::Result<PromptPosition, String> {
    match s {
        "append" => Ok(PromptPosition::Append),
        "prepend" => Ok(PromptPosition::Prepend),
        _ => Err(format!("unknown prompt position `{s}`")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}`")),
    }
}

fn parse_label_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("`{s}` is not a from:to pair"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok((num(a)?, num(b)?))
}

impl TrainArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            num_sources: self.num_sources,
            source_len: self
                .source_len
                .unwrap_or_else(|| TrainConfig::default_source_len(self.method)),
            k_shot: self.k_shot,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_router: self.lr_router,
            lr_source: self.lr_source,
            lr_private: self.lr_private,
            seed,
            weights_mode: self.weights,
            prompt_position: self.position,
            task_list: self.task_list.clone(),
            optimizer: self.optimizer,
            eval_every: 0,
        }
    }
}

struct Loaded {
    backbone: BackboneParams,
    fingerprint: String,
    data: Dataset,
}

fn load_inputs(inputs: &Inputs) -> Result<Loaded> {
    let file = load_backbone(&inputs.backbone)?;
    let data = Dataset::load(&inputs.tasks)?;
    if file.world != data.manifest.world {
        return Err(Error::Usage(format!(
            "backbone {} was pretrained for a different world than dataset {}",
            inputs.backbone.display(),
            inputs.tasks.display()
        )));
    }
    Ok(Loaded {
        fingerprint: file.backbone_sha256,
        backbone: file.params,
        data,
    })
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_line());
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenTasks(a) => gen_tasks(&a),
        Command::PretrainBackbone(a) => pretrain(&a),
        Command::Train(a) => train_runs(&a),
        Command::Eval(a) => eval(&a),
        Command::Isolate(a) => isolate(&a),
        Command::CrossEval(a) => cross_eval(&a),
        Command::LrGrid(a) => grid(&a),
        Command::IncludeStudy(a) => include(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn gen_tasks(a: &GenTasksArgs) -> Result<()> {
    let world = WorldConfig {
        latent_dim: a.latent_dim,
        num_labels: a.labels,
        margin: a.margin,
        seed: a.world_seed,
        ..presets::world()
    };
    let family = presets::family(a.spread);
    let data = Dataset::generate(world, family, a.seed)?;
    data.save(&a.out)?;
    println!("wrote {} tasks to {}", data.tasks.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let data = Dataset::load(&a.tasks)?;
    let model = presets::model_config(&data.manifest.world);
    let mut pcfg = presets::pretrain_config();
    pcfg.seed = a.seed;
    if let Some(steps) = a.steps {
        pcfg.steps = steps;
    }
    let held_out = data.rules();
    let started = Instant::now();
    let backbone = meta_train(&model, &data.world, &pcfg, &held_out, |s| {
        if (s.step + 1) % 500 == 0 {
            eprintln!("step {} loss {:.4}", s.step + 1, s.loss);
        }
    })?;
    let report = certify_backbone(&backbone, &data.world, &pcfg.certify, &held_out)?;
    let file = BackboneFile::new(backbone, data.manifest.world.clone(), pcfg.clone(), report.clone());
    write_json(&a.out.with_extension("certification.json"), &report)?;
    if !report.passed && !a.allow_uncertified {
        return Err(compt_core::Error::Certification(format!(
            "fine-tune {:.3} (need {}), prompt {:.3} (need {})",
            report.mean_finetune, pcfg.certify.min_finetune_accuracy, report.mean_prompt, pcfg.certify.min_prompt_accuracy
        ))
        .into());
    }
    save_backbone(&a.out, &file)?;
    println!(
        "backbone {} certified={} fine-tune {:.3} prompt {:.3} ({:.0}s)",
        file.backbone_sha256,
        report.passed,
        report.mean_finetune,
        report.mean_prompt,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train_one(cfg: &TrainConfig, loaded: &Loaded, out: &Path) -> Result<compt_core::MetricsRecord> {
    let started = Instant::now();
    let (model, mut metrics) = train(cfg, &loaded.backbone, &loaded.data.tasks)?;
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    let checkpoint = PromptCheckpoint::from_model(&model, &loaded.fingerprint, cfg.seed);
    let dir = reports::save_run(out, &metrics, &checkpoint)?;
    println!("{} average test {:.4}", dir.display(), metrics.average_test);
    Ok(metrics)
}

fn aggregate_name(args: &TrainArgs) -> String {
    format!("aggregate-{}-m{}-k{}", args.method.as_str(), args.num_sources, args.k_shot)
}

fn train_runs(a: &TrainArgs) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(Error::Usage("--seeds needs at least one value".into()));
    }
    let loaded = load_inputs(&a.inputs)?;
    let mut runs = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        runs.push(train_one(&a.config(seed), &loaded, &a.out)?);
    }
    let sweep = SweepReport::from_runs(runs);
    let name = aggregate_name(a);
    let (header, records) = reports::sweep_table("run", &[(name.clone(), sweep.clone())]);
    reports::write_report(&a.out, &name, &sweep, &header, &records)?;
    println!("average over seeds {:.4} +- {:.4}", sweep.average.mean, sweep.average.std);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let loaded = load_inputs(&a.inputs)?;
    let (_, model) = load_model(&a.checkpoint, Some(&loaded.fingerprint))?;
    let task = loaded.data.task(&a.task)?;
    let mask = match (&a.keep, a.drop_private) {
        (None, false) => None,
        (keep, drop_private) => {
            let m = model.num_sources();
            let keep = keep.clone().unwrap_or_else(|| (0..m).collect());
            Some(SourceMask::new(keep, !drop_private, m)?)
        }
    };
    let acc = evaluate(&model, &loaded.backbone, task, a.split, mask.as_ref(), PromptPosition::Append)?;
    println!("{}", serde_json::json!({ "task": a.task, "accuracy": acc }));
    Ok(())
}

fn isolate(a: &IsolateArgs) -> Result<()> {
    let loaded = load_inputs(&a.inputs)?;
    let (_, model) = load_model(&a.checkpoint, Some(&loaded.fingerprint))?;
    let tasks: Vec<_> = loaded
        .data
        .tasks
        .iter()
        .filter(|t| model.tasks.contains(&t.spec.task_id))
        .cloned()
        .collect();
    let report = isolation_study(&model, &loaded.backbone, &tasks, a.test_size, PromptPosition::Append)?;
    let (header, records) = reports::isolation_table(&report);
    reports::write_report(&a.out, "isolation", &report, &header, &records)?;
    let weights = WeightReport::of(&model)?;
    let (header, records) = reports::weight_table(&weights);
    reports::write_report(&a.out, "weights", &weights, &header, &records)?;
    println!("wrote isolation and weight reports to {}", a.out.join("reports").display());
    Ok(())
}

fn cross_eval(a: &CrossEvalArgs) -> Result<()> {
    let loaded = load_inputs(&a.inputs)?;
    let (_, model) = load_model(&a.checkpoint, Some(&loaded.fingerprint))?;
    let map: Option<BTreeMap<usize, usize>> = a.label_map.as_ref().map(|pairs| pairs.iter().copied().collect());
    let result = cross_task_eval(
        &model,
        &loaded.backbone,
        loaded.data.task(&a.prompt_of)?,
        loaded.data.task(&a.eval_on)?,
        map.as_ref(),
        PromptPosition::Append,
    )?;
    let name = format!("cross-{}-on-{}", a.prompt_of, a.eval_on);
    let (header, records) = reports::cross_table(&result);
    reports::write_report(&a.out, &name, &result, &header, &records)?;
    println!("{}", serde_json::json!({ "prompt_of": a.prompt_of, "eval_on": a.eval_on, "accuracy": result.accuracy }));
    Ok(())
}

fn first_seed(a: &TrainArgs) -> Result<u64> {
    a.seeds
        .first()
        .copied()
        .ok_or_else(|| Error::Usage("--seeds needs at least one value".into()))
}

fn grid(a: &LrGridArgs) -> Result<()> {
    let loaded = load_inputs(&a.train.inputs)?;
    let lrs = a.private_lrs.clone().unwrap_or_else(|| DEFAULT_PRIVATE_LRS.to_vec());
    let epochs = a.epochs_list.clone().unwrap_or_else(|| DEFAULT_GRID_EPOCHS.to_vec());
    let cfg = a.train.config(first_seed(&a.train)?);
    let cells = lr_grid(&cfg, &lrs, &epochs, &loaded.backbone, &loaded.data.tasks)?;
    let (header, records) = reports::lr_table(&cells);
    reports::write_report(&a.train.out, "lr-grid", &cells, &header, &records)?;
    for c in &cells {
        println!("lr_private {} epochs {}: {:.4}", c.lr_private, c.epochs, c.average_test);
    }
    Ok(())
}

fn include(a: &IncludeArgs) -> Result<()> {
    let loaded = load_inputs(&a.train.inputs)?;
    let cfg = a.train.config(first_seed(&a.train)?);
    let report = inclusion_study(&cfg, &a.extra_task, &a.train.seeds, &loaded.backbone, &loaded.data.tasks)?;
    let (header, records) = reports::inclusion_table(&report);
    reports::write_report(&a.train.out, &format!("inclusion-{}", a.extra_task), &report, &header, &records)?;
    println!(
        "relatives of {}: {:.4} without, {:.4} with",
        a.extra_task, report.relatives_without, report.relatives_with
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let loaded = load_inputs(&a.train.inputs)?;
    let mut results = Vec::with_capacity(a.num_sources_list.len());
    for &m in &a.num_sources_list {
        let cfg = TrainConfig {
            num_sources: m,
            ..a.train.config(first_seed(&a.train)?)
        };
        let sweep = run_seed_sweep(&cfg, &a.train.seeds, &loaded.backbone, &loaded.data.tasks)?;
        println!("M={m}: {:.4} +- {:.4}", sweep.average.mean, sweep.average.std);
        results.push((format!("m{m}"), sweep));
    }
    let (header, records) = reports::sweep_table("sources", &results);
    let json: BTreeMap<_, _> = results.iter().cloned().collect();
    reports::write_report(&a.train.out, &format!("sweep-{}", a.train.method.as_str()), &json, &header, &records)
}
