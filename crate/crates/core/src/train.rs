//! Multi-task prompt training and evaluation on a frozen backbone.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::backbone::{argmax, forward_on_tape, BackboneParams, LabelHead, PromptPosition};
use crate::compose::{compose_on_tape, CompositionMethod};
use crate::encoder::{encode_on_tape, EncoderVars};
use crate::error::{Error, Result};
use crate::model::{ComposedPrompt, PromptModel, WeightsMode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompt::SourceMask;
use crate::rng::{key_of, open_unit, stream};
use crate::router::{constant_weights, sample_weights_on_tape, TemperatureSchedule};
use crate::tape::{Tape, Var};
use crate::tasks::{sample_kshot, Example, Split, TaskData};
use crate::tensor::Tensor;

/// One multi-task prompt-training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub method: CompositionMethod,
    pub num_sources: usize,
    pub source_len: usize,
    pub k_shot: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_router: f64,
    pub lr_source: f64,
    pub lr_private: f64,
    pub seed: u64,
    pub weights_mode: WeightsMode,
    pub prompt_position: PromptPosition,
    /// Tasks to train on; empty means every task handed to [`train`].
    pub task_list: Vec<String>,
    pub optimizer: OptimizerKind,
    /// Evaluate dev and test every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: CompositionMethod::Ssum,
            num_sources: 2,
            source_len: 20,
            k_shot: 8,
            epochs: 30,
            batch_size: 8,
            lr_router: 0.1,
            lr_source: 0.05,
            lr_private: 0.02,
            seed: 0,
            weights_mode: WeightsMode::Learned,
            prompt_position: PromptPosition::Append,
            task_list: Vec::new(),
            optimizer: OptimizerKind::Sgd,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Default source length for a method: MCAT uses shorter segments.
    pub fn default_source_len(method: CompositionMethod) -> usize {
        if method == CompositionMethod::Mcat {
            10
        } else {
            20
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_router, self.lr_source, self.lr_private];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_shot == 0 || self.source_len == 0 {
            return Err(Error::Config(
                "epochs, batch size, k and source length must be positive".into(),
            ));
        }
        if self.method.uses_sources() && self.num_sources == 0 {
            return Err(Error::Config("at least one source prompt is required".into()));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Router => self.lr_router,
            ParamGroup::Sources => self.lr_source,
            // A plain prompt-tuning baseline has only one prompt, trained at the source rate.
            ParamGroup::Privates if self.method == CompositionMethod::Pt => self.lr_source,
            ParamGroup::Privates => self.lr_private,
        }
    }
}

/// The three learning-rate groups of the trainable prompt state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Router,
    /// Source prompts and their encoders.
    Sources,
    /// Private prompts and their encoders.
    Privates,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            Self::Router => "router",
            Self::Sources => "source_prompts_and_encoders",
            Self::Privates => "private_prompts_and_encoders",
        }
    }
}

/// Dev and test accuracy of every task after one epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochMetrics {
    pub epoch: usize,
    pub dev: BTreeMap<String, f64>,
    pub test: BTreeMap<String, f64>,
}

/// Everything a training run reports.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub backbone_sha256: String,
    pub epochs: Vec<EpochMetrics>,
    pub final_dev: BTreeMap<String, f64>,
    pub final_test: BTreeMap<String, f64>,
    pub average_dev: f64,
    pub average_test: f64,
    pub steps: usize,
    /// Filled in by callers that can read a clock.
    pub wall_clock_secs: f64,
}

/// Gradient norms observed in one step, for instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub temperature: f64,
    /// Norm over each private prompt and its encoder, by task.
    pub private_grad_norms: BTreeMap<String, f64>,
    /// Norm over each source prompt and its encoder.
    pub source_grad_norms: Vec<f64>,
    pub router_grad_norm: f64,
}

/// Tape handles of the whole prompt state.
struct PromptVars {
    sources: Vec<(Var, EncoderVars)>,
    privates: BTreeMap<String, (Var, EncoderVars)>,
    router: Option<Var>,
}

fn register_prompts(tape: &mut Tape, model: &PromptModel) -> PromptVars {
    let sources = model
        .bank
        .sources
        .iter()
        .zip(&model.source_encoders)
        .map(|(p, e)| (tape.param(p.tokens.clone()), e.register(tape, true)))
        .collect();
    let privates = model
        .bank
        .privates
        .iter()
        .map(|(id, p)| {
            let enc = model.private_encoders[id].register(tape, true);
            (id.clone(), (tape.param(p.tokens.clone()), enc))
        })
        .collect();
    let router = match (model.weights_mode, &model.router) {
        (WeightsMode::Learned, Some(r)) => Some(tape.param(r.logits.clone())),
        _ => None,
    };
    PromptVars {
        sources,
        privates,
        router,
    }
}

fn grad_norm(tape: &Tape, vars: &[Var]) -> f64 {
    libm::sqrt(vars.iter().filter_map(|&v| tape.grad(v)).map(Tensor::sq_norm).sum())
}

fn prompt_and_encoder(entry: &(Var, EncoderVars)) -> [Var; 5] {
    let [a, b, c, d] = entry.1.as_array();
    [entry.0, a, b, c, d]
}

/// Stateful multi-task trainer over a fixed backbone.
pub struct Trainer<'a> {
    backbone: &'a BackboneParams,
    fingerprint: String,
    config: TrainConfig,
    model: PromptModel,
    /// `(task, k-shot examples, label tokens)` in training order.
    data: Vec<(String, Vec<Example>, Vec<usize>)>,
    optimizer: Optimizer,
    schedule: TemperatureSchedule,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Samples each task's k-shot set and initialises the prompt state.
    pub fn new(config: TrainConfig, backbone: &'a BackboneParams, tasks: &[TaskData]) -> Result<Self> {
        config.validate()?;
        if !backbone.frozen {
            return Err(Error::Config("prompt training needs a frozen backbone".into()));
        }
        let chosen: Vec<&TaskData> = if config.task_list.is_empty() {
            tasks.iter().collect()
        } else {
            config
                .task_list
                .iter()
                .map(|id| {
                    tasks
                        .iter()
                        .find(|t| &t.spec.task_id == id)
                        .ok_or_else(|| Error::UnknownTask(id.clone()))
                })
                .collect::<Result<_>>()?
        };
        if chosen.is_empty() {
            return Err(Error::Config("no tasks to train".into()));
        }
        let mut data = Vec::with_capacity(chosen.len());
        for t in &chosen {
            if t.train.is_empty() {
                return Err(Error::Config(format!("task `{}` has an empty train set", t.spec.task_id)));
            }
            let shots = sample_kshot(t, config.k_shot, config.seed)?;
            data.push((t.spec.task_id.clone(), shots, t.spec.label_tokens.clone()));
        }
        let ids: Vec<String> = data.iter().map(|(id, _, _)| id.clone()).collect();
        let model = PromptModel::init(
            config.method,
            config.weights_mode,
            &ids,
            config.num_sources,
            config.source_len,
            backbone.config.d,
            config.seed,
        )?;
        let total = Self::steps_per_epoch_of(&data, config.batch_size) * config.epochs;
        Ok(Self {
            fingerprint: backbone.fingerprint(),
            backbone,
            optimizer: Optimizer::new(config.optimizer),
            schedule: TemperatureSchedule::new(total),
            config,
            model,
            data,
            step: 0,
        })
    }

    fn steps_per_epoch_of(data: &[(String, Vec<Example>, Vec<usize>)], batch: usize) -> usize {
        data.iter().map(|(_, ex, _)| ex.len().div_ceil(batch)).sum()
    }

    pub fn steps_per_epoch(&self) -> usize {
        Self::steps_per_epoch_of(&self.data, self.config.batch_size)
    }

    pub fn model(&self) -> &PromptModel {
        &self.model
    }

    pub fn into_model(self) -> PromptModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn kshot(&self, task: &str) -> Option<&[Example]> {
        self.data.iter().find(|(id, _, _)| id == task).map(|(_, ex, _)| ex.as_slice())
    }

    /// Round-robin batch schedule for one epoch: `(task index, batch)`.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<(usize, Vec<Example>)> {
        let per_task: Vec<Vec<Vec<Example>>> = self
            .data
            .iter()
            .enumerate()
            .map(|(t, (id, ex, _))| {
                let mut order = ex.clone();
                order.shuffle(&mut stream(self.config.seed, "batch-order", &[epoch as u64, key_of(id), t as u64]));
                order.chunks(self.config.batch_size).map(<[Example]>::to_vec).collect()
            })
            .collect();
        let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
        let mut plan = Vec::with_capacity(self.steps_per_epoch());
        for round in 0..rounds {
            for (t, batches) in per_task.iter().enumerate() {
                if let Some(b) = batches.get(round) {
                    plan.push((t, b.clone()));
                }
            }
        }
        plan
    }

    /// One optimisation step on a batch of task `task_idx`.
    pub fn step(&mut self, task_idx: usize, batch: &[Example]) -> Result<StepReport> {
        let (task, _, labels) = &self.data[task_idx];
        let task = task.clone();
        let labels = labels.clone();
        let model_task = self.model.task_index(&task)?;
        let tau = self.schedule.anneal(self.step);

        let mut tape = Tape::new();
        let bb = self.backbone.register(&mut tape, false);
        let head = LabelHead::register(&mut tape, &bb, &labels)?;
        let vars = register_prompts(&mut tape, &self.model);

        let (pv, penc) = vars.privates[&task];
        let private = encode_on_tape(&mut tape, &penc, pv)?;
        let mut sources = Vec::with_capacity(vars.sources.len());
        for (sv, senc) in &vars.sources {
            sources.push(encode_on_tape(&mut tape, senc, *sv)?);
        }
        let weights = if !self.model.method.uses_sources() {
            None
        } else if let Some(logits) = vars.router {
            let mut rng = stream(self.config.seed, "router-noise", &[self.step as u64, model_task as u64]);
            let u: Vec<f64> = (0..sources.len()).map(|_| open_unit(&mut rng)).collect();
            Some(sample_weights_on_tape(&mut tape, logits, model_task, &u, tau)?)
        } else {
            let w = constant_weights(sources.len());
            Some(tape.constant(Tensor::matrix(1, w.len(), w)?))
        };
        let target = compose_on_tape(&mut tape, self.model.method, private, &sources, weights)?;

        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for ex in batch {
            let class = labels
                .iter()
                .position(|&l| l == ex.label)
                .ok_or(Error::UnmappedLabel(ex.label))?;
            targets.push(class);
            rows.push(forward_on_tape(
                &mut tape,
                &self.backbone.config,
                &bb,
                &head,
                Some(target),
                None,
                &ex.tokens,
                self.config.prompt_position,
            )?);
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                task,
                temperature: tau,
            });
        }
        tape.backward(loss)?;

        let report = StepReport {
            step: self.step,
            task: task.clone(),
            loss: loss_value,
            temperature: tau,
            private_grad_norms: vars
                .privates
                .iter()
                .map(|(id, e)| (id.clone(), grad_norm(&tape, &prompt_and_encoder(e))))
                .collect(),
            source_grad_norms: vars.sources.iter().map(|e| grad_norm(&tape, &prompt_and_encoder(e))).collect(),
            router_grad_norm: vars.router.map_or(0.0, |r| grad_norm(&tape, &[r])),
        };
        self.apply(&mut tape, &vars)?;
        self.step += 1;
        Ok(report)
    }

    fn apply(&mut self, tape: &mut Tape, vars: &PromptVars) -> Result<()> {
        let lr_src = self.config.lr(ParamGroup::Sources);
        let lr_priv = self.config.lr(ParamGroup::Privates);
        let lr_router = self.config.lr(ParamGroup::Router);
        let mut slot = 0u64;
        let mut upd = |opt: &mut Optimizer, tape: &mut Tape, v: Var, p: &mut Tensor, lr: f64| {
            let g = tape.take_grad(v).expect("registered as a parameter");
            opt.update(slot, p, &g, lr);
            slot += 1;
        };
        let model = &mut self.model;
        for (s, (sv, senc)) in vars.sources.iter().enumerate() {
            upd(&mut self.optimizer, tape, *sv, &mut model.bank.sources[s].tokens, lr_src);
            let params = model.source_encoders[s].tensors_mut();
            for (v, p) in senc.as_array().into_iter().zip(params) {
                upd(&mut self.optimizer, tape, v, p, lr_src);
            }
        }
        for (id, (pv, penc)) in &vars.privates {
            let prompt = model.bank.privates.get_mut(id).ok_or_else(|| Error::UnknownTask(id.clone()))?;
            upd(&mut self.optimizer, tape, *pv, &mut prompt.tokens, lr_priv);
            let params = model.private_encoders.get_mut(id).expect("same keys as privates").tensors_mut();
            for (v, p) in penc.as_array().into_iter().zip(params) {
                upd(&mut self.optimizer, tape, v, p, lr_priv);
            }
        }
        if let (Some(rv), Some(router)) = (vars.router, model.router.as_mut()) {
            upd(&mut self.optimizer, tape, rv, &mut router.logits, lr_router);
            router.temperature = self.schedule.anneal(self.step + 1);
        }
        Ok(())
    }

    /// Runs every epoch, evaluating as configured, and returns the metrics.
    pub fn run(&mut self, tasks: &[TaskData]) -> Result<MetricsRecord> {
        self.run_with(tasks, |_| {})
    }

    /// Like [`Trainer::run`], calling `observe` after every step.
    pub fn run_with(&mut self, tasks: &[TaskData], mut observe: impl FnMut(&StepReport)) -> Result<MetricsRecord> {
        let mut epochs = Vec::new();
        for epoch in 0..self.config.epochs {
            for (t, batch) in self.epoch_plan(epoch) {
                let report = self.step(t, &batch)?;
                observe(&report);
            }
            if self.backbone.fingerprint() != self.fingerprint {
                return Err(Error::FrozenViolation);
            }
            let last = epoch + 1 == self.config.epochs;
            let every = self.config.eval_every;
            if last || (every > 0 && (epoch + 1) % every == 0) {
                epochs.push(self.evaluate_all(tasks, epoch + 1)?);
            }
        }
        let last = epochs.last().cloned().expect("final epoch is always evaluated");
        let mean = |m: &BTreeMap<String, f64>| m.values().sum::<f64>() / m.len() as f64;
        Ok(MetricsRecord {
            seed: self.config.seed,
            backbone_sha256: self.fingerprint.clone(),
            config: self.config.clone(),
            epochs,
            average_dev: mean(&last.dev),
            average_test: mean(&last.test),
            final_dev: last.dev,
            final_test: last.test,
            steps: self.step,
            wall_clock_secs: 0.0,
        })
    }

    fn evaluate_all(&self, tasks: &[TaskData], epoch: usize) -> Result<EpochMetrics> {
        let mut dev = BTreeMap::new();
        let mut test = BTreeMap::new();
        for (id, _, _) in &self.data {
            let task = tasks
                .iter()
                .find(|t| &t.spec.task_id == id)
                .ok_or_else(|| Error::UnknownTask(id.clone()))?;
            let pos = self.config.prompt_position;
            dev.insert(id.clone(), evaluate(&self.model, self.backbone, task, Split::Dev, None, pos)?);
            test.insert(id.clone(), evaluate(&self.model, self.backbone, task, Split::Test, None, pos)?);
        }
        Ok(EpochMetrics { epoch, dev, test })
    }
}

/// Trains a prompt model and reports its metrics.
pub fn train(config: &TrainConfig, backbone: &BackboneParams, tasks: &[TaskData]) -> Result<(PromptModel, MetricsRecord)> {
    let mut trainer = Trainer::new(config.clone(), backbone, tasks)?;
    let metrics = trainer.run(tasks)?;
    Ok((trainer.into_model(), metrics))
}

/// Predicted label tokens for `examples` under a fixed prompt.
pub fn predict(
    backbone: &BackboneParams,
    prompt: &ComposedPrompt,
    labels: &[usize],
    examples: &[Example],
    position: PromptPosition,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bb = backbone.register(&mut tape, false);
    let head = LabelHead::register(&mut tape, &bb, labels)?;
    let p = tape.constant(prompt.tokens.clone());
    let mark = tape.len();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = forward_on_tape(
            &mut tape,
            &backbone.config,
            &bb,
            &head,
            Some(p),
            prompt.visible.as_deref(),
            &ex.tokens,
            position,
        )?;
        out.push(labels[argmax(tape.value(logits).data())]);
        tape.truncate(mark);
    }
    Ok(out)
}

/// Fraction of `examples` whose predicted label matches.
pub fn accuracy(predictions: &[usize], examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    hits as f64 / examples.len() as f64
}

/// Accuracy of the model's target prompt for `task` on one split.
pub fn evaluate(
    model: &PromptModel,
    backbone: &BackboneParams,
    task: &TaskData,
    split: Split,
    mask: Option<&SourceMask>,
    position: PromptPosition,
) -> Result<f64> {
    let prompt = model.target_prompt(&task.spec.task_id, mask)?;
    let examples = task.split(split);
    let preds = predict(backbone, &prompt, &task.spec.label_tokens, examples, position)?;
    Ok(accuracy(&preds, examples))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
        };
        Self { mean, std }
    }
}

/// Per-task and average test accuracy across seeds.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub per_task: BTreeMap<String, Stat>,
    pub average: Stat,
    pub runs: Vec<MetricsRecord>,
}

impl SweepReport {
    pub fn from_runs(runs: Vec<MetricsRecord>) -> Self {
        let mut per_task_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (t, &a) in &r.final_test {
                per_task_values.entry(t.clone()).or_default().push(a);
            }
        }
        let averages: Vec<f64> = runs.iter().map(|r| r.average_test).collect();
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            per_task: per_task_values.into_iter().map(|(t, v)| (t, Stat::of(&v))).collect(),
            average: Stat::of(&averages),
            runs,
        }
    }
}

/// Trains once per seed and aggregates test accuracy.
pub fn run_seed_sweep(
    config: &TrainConfig,
    seeds: &[u64],
    backbone: &BackboneParams,
    tasks: &[TaskData],
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        runs.push(train(&cfg, backbone, tasks)?.1);
    }
    Ok(SweepReport::from_runs(runs))
}
