//! Meta-training a backbone that can be steered by soft prompts, and
//! certifying that it can.
//!
//! During pretraining every step draws fresh random rules. Each rule is turned
//! into a prompt by a fixed random generator (rows `r A + B[pos] - B[neg]`
//! plus per-row noise, with a random number of rows) and the backbone learns
//! to classify inputs under that prompt. Afterwards only the backbone is kept:
//! prompts for new tasks have to be found by gradient descent.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{forward_on_tape, BackboneParams, LabelHead, ModelConfig, PromptPosition};
use crate::compose::CompositionMethod;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{normal_vec, stream, StreamRng};
use crate::tape::Tape;
use crate::tasks::{generate_examples, Example, Split, TaskData, TaskSpec, World};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, TrainConfig};

/// Settings for meta-training and certification.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Rules drawn per step.
    pub rules_per_step: usize,
    /// Examples per rule per step.
    pub examples_per_rule: usize,
    pub lr: f64,
    /// Inclusive range of generated prompt lengths.
    pub prompt_len: (usize, usize),
    /// Entry scale of generated prompts.
    pub prompt_scale: f64,
    /// Per-entry noise added to each generated prompt row.
    pub prompt_noise: f64,
    /// Pretraining rules this close (absolute cosine) to a held-out rule are redrawn.
    pub max_holdout_cosine: f64,
    pub certify: CertifyConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1500,
            rules_per_step: 4,
            examples_per_rule: 8,
            lr: 3e-3,
            prompt_len: (4, 32),
            prompt_scale: 1.0,
            prompt_noise: 0.3,
            max_holdout_cosine: 0.9,
            certify: CertifyConfig::default(),
        }
    }
}

/// How a frozen backbone is tested for prompt steerability.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CertifyConfig {
    pub seed: u64,
    pub tasks: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub prompt_len: usize,
    pub epochs: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub prompt_lr: f64,
    pub min_finetune_accuracy: f64,
    pub min_prompt_accuracy: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            tasks: 3,
            train_size: 256,
            test_size: 200,
            prompt_len: 20,
            epochs: 20,
            finetune_steps: 800,
            finetune_lr: 3e-4,
            prompt_lr: 0.01,
            min_finetune_accuracy: 0.9,
            min_prompt_accuracy: 0.75,
        }
    }
}

/// Fixed random map from a rule and a label pair to prompt rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerator {
    /// `latent x d`.
    pub rule_proj: Tensor,
    /// `num_labels x d`.
    pub label_rows: Tensor,
}

impl PromptGenerator {
    pub fn new(latent: usize, num_labels: usize, d: usize, scale: f64, rng: &mut StreamRng) -> Self {
        let a = normal_vec(rng, latent * d, scale);
        let b = normal_vec(rng, num_labels * d, scale);
        Self {
            rule_proj: Tensor::matrix(latent, d, a).expect("sized"),
            label_rows: Tensor::matrix(num_labels, d, b).expect("sized"),
        }
    }

    /// `rows` prompt rows for `rule` with label tokens `[neg, pos]`.
    pub fn generate(&self, rule: &[f64], labels: [usize; 2], rows: usize, noise: f64, rng: &mut StreamRng) -> Tensor {
        let d = self.rule_proj.cols();
        let mut base = alloc::vec![0.0; d];
        for (i, r) in rule.iter().enumerate() {
            for (b, a) in base.iter_mut().zip(self.rule_proj.row(i)) {
                *b += r * a;
            }
        }
        for ((b, p), n) in base.iter_mut().zip(self.label_rows.row(labels[1])).zip(self.label_rows.row(labels[0])) {
            *b += p - n;
        }
        let jitter = normal_vec(rng, rows * d, noise);
        let data = (0..rows * d).map(|i| base[i % d] + jitter[i]).collect();
        Tensor::matrix(rows, d, data).expect("sized")
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    dot / (na * nb)
}

/// Draws a rule that is not close to any held-out rule.
fn disjoint_rule(world: &World, held_out: &[Vec<f64>], max_cos: f64, rng: &mut StreamRng) -> Vec<f64> {
    loop {
        let r = world.random_rule(rng);
        if held_out.iter().all(|h| libm::fabs(cosine(&r, h)) < max_cos) {
            return r;
        }
    }
}

fn random_pair(num_labels: usize, rng: &mut StreamRng) -> [usize; 2] {
    let mut labels: Vec<usize> = (0..num_labels).collect();
    labels.shuffle(rng);
    [labels[0], labels[1]]
}

/// Progress of one pretraining step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainStep {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Meta-trains a backbone on random rules kept away from `held_out` rules.
///
/// The result is frozen but not certified; see [`certify_backbone`].
pub fn meta_train(
    config: &ModelConfig,
    world: &World,
    pcfg: &PretrainConfig,
    held_out: &[Vec<f64>],
    mut observe: impl FnMut(&PretrainStep),
) -> Result<BackboneParams> {
    if world.vocab != config.vocab || world.seq_len != config.seq_len {
        return Err(Error::Config("world and backbone disagree on vocabulary or sequence length".into()));
    }
    if pcfg.prompt_len.0 == 0 || pcfg.prompt_len.0 > pcfg.prompt_len.1 || pcfg.prompt_len.1 > config.max_prompt_len {
        return Err(Error::Config(format!("bad pretraining prompt lengths {:?}", pcfg.prompt_len)));
    }
    let mut backbone = BackboneParams::init(config, pcfg.seed)?;
    let generator = PromptGenerator::new(
        world.latent_dim,
        world.num_labels,
        config.d,
        pcfg.prompt_scale,
        &mut stream(pcfg.seed, "prompt-generator", &[]),
    );
    let mut opt = Optimizer::new(OptimizerKind::adam());
    for step in 0..pcfg.steps {
        let mut rng = stream(pcfg.seed, "pretrain-step", &[step as u64]);
        let mut tape = Tape::new();
        let vars = backbone.register(&mut tape, true);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..pcfg.rules_per_step {
            let rule = disjoint_rule(world, held_out, pcfg.max_holdout_cosine, &mut rng);
            let labels = random_pair(world.num_labels, &mut rng);
            let len = rng.gen_range(pcfg.prompt_len.0..=pcfg.prompt_len.1);
            let prompt = generator.generate(&rule, labels, len, pcfg.prompt_noise, &mut rng);
            let prompt = tape.constant(prompt);
            let head = LabelHead::register(&mut tape, &vars, &labels)?;
            let spec = TaskSpec {
                task_id: String::new(),
                rule,
                label_tokens: labels.to_vec(),
                group: String::new(),
                noise_rate: 0.0,
            };
            for _ in 0..pcfg.examples_per_rule {
                let tokens = world.sample_clear(&spec.rule, &mut rng);
                let label = spec.clean_label(world, &tokens);
                targets.push(usize::from(label == labels[1]));
                rows.push(forward_on_tape(
                    &mut tape,
                    config,
                    &vars,
                    &head,
                    Some(prompt),
                    None,
                    &tokens,
                    PromptPosition::Append,
                )?);
            }
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                task: "pretraining".into(),
                temperature: 0.0,
            });
        }
        let lv = tape.value(logits);
        let hits = (0..lv.rows())
            .filter(|&i| usize::from(lv.at(i, 1) > lv.at(i, 0)) == targets[i])
            .count();
        tape.backward(loss)?;
        for (slot, (v, p)) in vars.all().into_iter().zip(backbone.tensors_mut()).enumerate() {
            let g = tape.take_grad(v).expect("trainable");
            opt.update(slot as u64, p, &g, pcfg.lr);
        }
        observe(&PretrainStep {
            step,
            loss: loss_value,
            accuracy: hits as f64 / targets.len() as f64,
        });
    }
    Ok(backbone.freeze())
}

/// Accuracies measured during certification, one entry per held-out task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CertificationReport {
    pub backbone_sha256: String,
    pub finetune_accuracy: Vec<f64>,
    pub prompt_accuracy: Vec<f64>,
    pub mean_finetune: f64,
    pub mean_prompt: f64,
    pub passed: bool,
}

/// Fresh tasks from the pretraining distribution, used only for certification.
pub fn certification_tasks(world: &World, cfg: &CertifyConfig, held_out: &[Vec<f64>]) -> Vec<TaskData> {
    (0..cfg.tasks)
        .map(|i| {
            let mut rng = stream(cfg.seed, "certify-task", &[i as u64]);
            let rule = disjoint_rule(world, held_out, 0.9, &mut rng);
            let spec = TaskSpec {
                task_id: format!("certify-{i}"),
                rule,
                label_tokens: random_pair(world.num_labels, &mut rng).to_vec(),
                group: "certify".into(),
                noise_rate: 0.0,
            };
            let mut used = alloc::collections::BTreeSet::new();
            let test = generate_examples(world, &spec, cfg.test_size, &mut used, &mut rng);
            let train = generate_examples(world, &spec, cfg.train_size, &mut used, &mut rng);
            TaskData {
                spec,
                train,
                dev: Vec::new(),
                test,
            }
        })
        .collect()
}

/// Upper-bound oracle: fine-tunes a copy of the backbone together with a
/// prompt on the task's training set and reports test accuracy.
pub fn finetune_accuracy(backbone: &BackboneParams, task: &TaskData, cfg: &CertifyConfig) -> Result<f64> {
    let config = &backbone.config;
    let mut params = backbone.clone();
    params.frozen = false;
    let mut prompt = Tensor::zeros(&[cfg.prompt_len, config.d]);
    let labels = &task.spec.label_tokens;
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let batch = 16.min(task.train.len());
    for step in 0..cfg.finetune_steps {
        let mut rng = stream(cfg.seed, "finetune-batch", &[step as u64]);
        let chosen: Vec<&Example> = task.train.choose_multiple(&mut rng, batch).collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let head = LabelHead::register(&mut tape, &vars, labels)?;
        let p = tape.param(prompt.clone());
        let mut rows = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for ex in chosen {
            targets.push(task.spec.class_of(ex.label).ok_or(Error::UnmappedLabel(ex.label))?);
            rows.push(forward_on_tape(&mut tape, config, &vars, &head, Some(p), None, &ex.tokens, PromptPosition::Append)?);
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let mut slot = 0u64;
        for (v, t) in vars.all().into_iter().zip(params.tensors_mut()) {
            opt.update(slot, t, &tape.take_grad(v).expect("trainable"), cfg.finetune_lr);
            slot += 1;
        }
        opt.update(slot, &mut prompt, &tape.take_grad(p).expect("trainable"), cfg.finetune_lr);
    }
    let prompt = crate::model::ComposedPrompt { tokens: prompt, visible: None };
    let preds = crate::train::predict(&params, &prompt, labels, &task.test, PromptPosition::Append)?;
    Ok(crate::train::accuracy(&preds, &task.test))
}

/// Test accuracy of a single tuned prompt on the frozen backbone.
pub fn prompt_accuracy(backbone: &BackboneParams, task: &TaskData, cfg: &CertifyConfig) -> Result<f64> {
    let tc = TrainConfig {
        method: CompositionMethod::Pt,
        num_sources: 0,
        source_len: cfg.prompt_len,
        k_shot: task.train.len(),
        epochs: cfg.epochs,
        batch_size: 8,
        lr_source: cfg.prompt_lr,
        seed: cfg.seed,
        optimizer: OptimizerKind::adam(),
        ..TrainConfig::default()
    };
    let one = core::slice::from_ref(task);
    let (model, _) = train(&tc, backbone, one)?;
    evaluate(&model, backbone, task, Split::Test, None, PromptPosition::Append)
}

/// Checks that `backbone` can be adapted to unseen rules by prompts alone.
pub fn certify_backbone(
    backbone: &BackboneParams,
    world: &World,
    cfg: &CertifyConfig,
    held_out: &[Vec<f64>],
) -> Result<CertificationReport> {
    let tasks = certification_tasks(world, cfg, held_out);
    let frozen = backbone.clone().freeze();
    let mut finetune = Vec::with_capacity(tasks.len());
    let mut prompt = Vec::with_capacity(tasks.len());
    for t in &tasks {
        finetune.push(finetune_accuracy(&frozen, t, cfg)?);
        prompt.push(prompt_accuracy(&frozen, t, cfg)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mp) = (mean(&finetune), mean(&prompt));
    Ok(CertificationReport {
        backbone_sha256: frozen.fingerprint(),
        passed: mf >= cfg.min_finetune_accuracy && mp >= cfg.min_prompt_accuracy,
        finetune_accuracy: finetune,
        prompt_accuracy: prompt,
        mean_finetune: mf,
        mean_prompt: mp,
    })
}

/// Meta-trains, then certifies; an uncertified backbone is an error.
pub fn pretrain_backbone(
    config: &ModelConfig,
    world: &World,
    pcfg: &PretrainConfig,
    held_out: &[Vec<f64>],
    observe: impl FnMut(&PretrainStep),
) -> Result<(BackboneParams, CertificationReport)> {
    let backbone = meta_train(config, world, pcfg, held_out, observe)?;
    let report = certify_backbone(&backbone, world, &pcfg.certify, held_out)?;
    if !report.passed {
        return Err(Error::Certification(format!(
            "fine-tune {:.3} (need {}), prompt {:.3} (need {})",
            report.mean_finetune,
            pcfg.certify.min_finetune_accuracy,
            report.mean_prompt,
            pcfg.certify.min_prompt_accuracy
        )));
    }
    Ok((backbone, report))
}
