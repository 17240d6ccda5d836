//! Analyses of trained prompt models: isolation, router weights, cross-task
//! transfer, learning-rate grids and task inclusion.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{BackboneParams, PromptPosition};
use crate::compose::CompositionMethod;
use crate::error::{Error, Result};
use crate::model::{PromptModel, WeightsMode};
use crate::prompt::SourceMask;
use crate::tasks::{Example, TaskData};
use crate::train::{accuracy, predict, run_seed_sweep, train, Stat, TrainConfig};

/// Test examples used by isolation studies unless told otherwise.
pub const ISOLATION_TEST_SIZE: usize = 100;

/// Column names of an isolation report for `num_sources` sources.
pub fn isolation_columns(num_sources: usize) -> Vec<String> {
    let mut cols: Vec<String> = (0..num_sources).map(|s| format!("source_{s}")).collect();
    cols.extend(["all_src".into(), "private".into(), "total".into()]);
    cols
}

/// The mask behind each isolation column (`None` means no masking).
///
/// Single-source columns drop the private prompt under SSUM and keep it under
/// MSUM and MCAT, where it is a multiplicative factor. `all_src` keeps every
/// source and drops the private prompt; `private` keeps only the private prompt.
pub fn isolation_masks(method: CompositionMethod, num_sources: usize) -> Result<Vec<(String, Option<SourceMask>)>> {
    if !method.uses_sources() {
        return Err(Error::Config("plain prompt tuning has no sources to isolate".into()));
    }
    let keep_private_with_one = method != CompositionMethod::Ssum;
    let mut out = Vec::with_capacity(num_sources + 3);
    for s in 0..num_sources {
        out.push((format!("source_{s}"), Some(SourceMask::new([s], keep_private_with_one, num_sources)?)));
    }
    out.push(("all_src".into(), Some(SourceMask::new(0..num_sources, false, num_sources)?)));
    out.push(("private".into(), Some(SourceMask::new([], true, num_sources)?)));
    out.push(("total".into(), None));
    Ok(out)
}

/// Accuracy per task and isolation column.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IsolationReport {
    pub method: CompositionMethod,
    pub columns: Vec<String>,
    pub test_size: usize,
    pub accuracy: BTreeMap<String, BTreeMap<String, f64>>,
}

impl IsolationReport {
    pub fn get(&self, task: &str, column: &str) -> Option<f64> {
        self.accuracy.get(task)?.get(column).copied()
    }
}

fn prefix(examples: &[Example], n: usize) -> &[Example] {
    &examples[..n.min(examples.len())]
}

/// Evaluates every task under every isolation mask on its first `test_size` test examples.
pub fn isolation_study(
    model: &PromptModel,
    backbone: &BackboneParams,
    tasks: &[TaskData],
    test_size: usize,
    position: PromptPosition,
) -> Result<IsolationReport> {
    let masks = isolation_masks(model.method, model.num_sources())?;
    let mut acc = BTreeMap::new();
    for task in tasks {
        let examples = prefix(&task.test, test_size);
        let mut row = BTreeMap::new();
        for (name, mask) in &masks {
            let prompt = model.target_prompt(&task.spec.task_id, mask.as_ref())?;
            let preds = predict(backbone, &prompt, &task.spec.label_tokens, examples, position)?;
            row.insert(name.clone(), accuracy(&preds, examples));
        }
        acc.insert(task.spec.task_id.clone(), row);
    }
    Ok(IsolationReport {
        method: model.method,
        columns: masks.into_iter().map(|(n, _)| n).collect(),
        test_size,
        accuracy: acc,
    })
}

/// Router logits and inference weights for one task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightRow {
    pub task: String,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightReport {
    pub weights_mode: WeightsMode,
    pub rows: Vec<WeightRow>,
}

impl WeightReport {
    pub fn of(model: &PromptModel) -> Result<Self> {
        let router = model
            .router
            .as_ref()
            .ok_or_else(|| Error::Config("plain prompt tuning has no router".into()))?;
        let rows = model
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| WeightRow {
                task: t.clone(),
                logits: router.logits.row(i).to_vec(),
                weights: model.source_weights(i).expect("model has sources"),
            })
            .collect();
        Ok(Self {
            weights_mode: model.weights_mode,
            rows,
        })
    }

    /// Index of the source with the largest weight for `task`.
    pub fn preferred_source(&self, task: &str) -> Option<(usize, f64)> {
        let row = self.rows.iter().find(|r| r.task == task)?;
        let best = crate::backbone::argmax(&row.weights);
        Some((best, row.weights[best]))
    }
}

/// Result of evaluating one task's prompt on another task's data.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrossTaskResult {
    pub prompt_of: String,
    pub eval_on: String,
    pub accuracy: f64,
    /// `(gold, predicted, count)` in label-token ids of the evaluated task.
    pub confusion: Vec<(usize, usize, usize)>,
}

impl CrossTaskResult {
    /// Share of predictions equal to `label`.
    pub fn prediction_share(&self, label: usize) -> f64 {
        let total: usize = self.confusion.iter().map(|c| c.2).sum();
        let hits: usize = self.confusion.iter().filter(|c| c.1 == label).map(|c| c.2).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Composes the prompt of `prompt_of` and evaluates it on `eval_on`'s test set.
///
/// The backbone scores the prompt task's label tokens; `label_map` translates
/// them into the evaluated task's labels. Without a map every prompt label must
/// already be a label of the evaluated task.
pub fn cross_task_eval(
    model: &PromptModel,
    backbone: &BackboneParams,
    prompt_of: &TaskData,
    eval_on: &TaskData,
    label_map: Option<&BTreeMap<usize, usize>>,
    position: PromptPosition,
) -> Result<CrossTaskResult> {
    let source_labels = &prompt_of.spec.label_tokens;
    let target_labels: BTreeSet<usize> = eval_on.spec.label_tokens.iter().copied().collect();
    let mapping: BTreeMap<usize, usize> = source_labels
        .iter()
        .map(|&l| {
            let mapped = match label_map {
                Some(m) => *m.get(&l).ok_or(Error::UnmappedLabel(l))?,
                None => l,
            };
            if target_labels.contains(&mapped) {
                Ok((l, mapped))
            } else {
                Err(Error::UnmappedLabel(l))
            }
        })
        .collect::<Result<_>>()?;
    let prompt = model.target_prompt(&prompt_of.spec.task_id, None)?;
    let examples = &eval_on.test;
    let raw = predict(backbone, &prompt, source_labels, examples, position)?;
    let preds: Vec<usize> = raw.iter().map(|p| mapping[p]).collect();
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, e) in preds.iter().zip(examples) {
        *counts.entry((e.label, *p)).or_default() += 1;
    }
    Ok(CrossTaskResult {
        prompt_of: prompt_of.spec.task_id.clone(),
        eval_on: eval_on.spec.task_id.clone(),
        accuracy: accuracy(&preds, examples),
        confusion: counts.into_iter().map(|((g, p), c)| (g, p, c)).collect(),
    })
}

/// One cell of a learning-rate grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrCell {
    pub lr_private: f64,
    pub epochs: usize,
    pub average_test: f64,
}

/// Private learning rates explored by default.
pub const DEFAULT_PRIVATE_LRS: [f64; 3] = [0.01, 0.02, 0.05];
/// Epoch budgets explored by default.
pub const DEFAULT_GRID_EPOCHS: [usize; 2] = [30, 50];

/// Trains one independent run per `(lr_private, epochs)` pair.
pub fn lr_grid(
    base: &TrainConfig,
    private_lrs: &[f64],
    epochs_list: &[usize],
    backbone: &BackboneParams,
    tasks: &[TaskData],
) -> Result<Vec<LrCell>> {
    if private_lrs.is_empty() || epochs_list.is_empty() {
        return Err(Error::Config("learning-rate grid needs at least one value per axis".into()));
    }
    let mut cells = Vec::with_capacity(private_lrs.len() * epochs_list.len());
    for &lr_private in private_lrs {
        for &epochs in epochs_list {
            let cfg = TrainConfig {
                lr_private,
                epochs,
                ..base.clone()
            };
            let (_, metrics) = train(&cfg, backbone, tasks)?;
            cells.push(LrCell {
                lr_private,
                epochs,
                average_test: metrics.average_test,
            });
        }
    }
    Ok(cells)
}

/// Paired accuracies of the base tasks with and without an extra task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InclusionReport {
    pub base_tasks: Vec<String>,
    pub extra_task: String,
    /// Base tasks in the extra task's group.
    pub relatives: Vec<String>,
    pub seeds: Vec<u64>,
    pub without: BTreeMap<String, Stat>,
    pub with: BTreeMap<String, Stat>,
    pub relatives_without: f64,
    pub relatives_with: f64,
}

/// Runs the base task list with and without `extra_task`, seed for seed.
pub fn inclusion_study(
    config: &TrainConfig,
    extra_task: &str,
    seeds: &[u64],
    backbone: &BackboneParams,
    tasks: &[TaskData],
) -> Result<InclusionReport> {
    let base: Vec<String> = if config.task_list.is_empty() {
        tasks
            .iter()
            .map(|t| t.spec.task_id.clone())
            .filter(|id| id != extra_task)
            .collect()
    } else {
        config.task_list.clone()
    };
    if base.iter().any(|t| t == extra_task) {
        return Err(Error::Config(format!("`{extra_task}` is already a base task")));
    }
    let extra = tasks
        .iter()
        .find(|t| t.spec.task_id == extra_task)
        .ok_or_else(|| Error::UnknownTask(extra_task.into()))?;
    let relatives: Vec<String> = tasks
        .iter()
        .filter(|t| t.spec.group == extra.spec.group && base.contains(&t.spec.task_id))
        .map(|t| t.spec.task_id.clone())
        .collect();

    let without_cfg = TrainConfig {
        task_list: base.clone(),
        ..config.clone()
    };
    let mut with_list = base.clone();
    with_list.push(extra_task.into());
    let with_cfg = TrainConfig {
        task_list: with_list,
        ..config.clone()
    };
    let without = run_seed_sweep(&without_cfg, seeds, backbone, tasks)?;
    let with = run_seed_sweep(&with_cfg, seeds, backbone, tasks)?;
    let restrict = |m: &BTreeMap<String, Stat>| -> BTreeMap<String, Stat> {
        m.iter()
            .filter(|(k, _)| base.contains(k))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    };
    let mean_of = |m: &BTreeMap<String, Stat>| {
        let vals: Vec<f64> = relatives.iter().filter_map(|r| m.get(r)).map(|s| s.mean).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let (without, with) = (restrict(&without.per_task), restrict(&with.per_task));
    Ok(InclusionReport {
        base_tasks: base,
        extra_task: extra_task.into(),
        seeds: seeds.to_vec(),
        relatives_without: mean_of(&without),
        relatives_with: mean_of(&with),
        relatives,
        without,
        with,
    })
}
