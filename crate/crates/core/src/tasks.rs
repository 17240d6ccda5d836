//! Synthetic classification tasks with controllable relatedness.
//!
//! A [`World`] fixes a latent feature vector for every input token. A task is
//! a rule vector in that latent space: an input sequence is labelled by the
//! sign of `rule . sum_i feature(token_i)`, mapped onto the task's two label
//! tokens. Related tasks use slightly rotated copies of one rule, conflicting
//! tasks use its negation, and label tokens may be shared across tasks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{key_of, normal_vec, stream, StreamRng};

/// Token vocabulary layout and per-token latent features.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct World {
    pub vocab: usize,
    /// Tokens `0..num_labels` are label tokens; the rest are input tokens.
    pub num_labels: usize,
    pub seq_len: usize,
    pub latent_dim: usize,
    /// Sequences whose rule score lies within `margin * sqrt(seq_len)` of zero
    /// are never labelled, so every task has a clear decision margin.
    pub margin: f64,
    pub seed: u64,
    /// `features[v]` for every token; all zeros for label tokens.
    pub features: Vec<Vec<f64>>,
}

impl World {
    pub fn new(vocab: usize, num_labels: usize, seq_len: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if num_labels < 2 || vocab <= num_labels || seq_len == 0 || latent_dim == 0 {
            return Err(Error::Config(format!(
                "world needs >= 2 labels and input tokens (vocab {vocab}, labels {num_labels})"
            )));
        }
        let mut rng = stream(seed, "world-features", &[]);
        let features = (0..vocab)
            .map(|v| {
                if v < num_labels {
                    vec![0.0; latent_dim]
                } else {
                    normal_vec(&mut rng, latent_dim, 1.0)
                }
            })
            .collect();
        Ok(Self {
            vocab,
            num_labels,
            seq_len,
            latent_dim,
            margin: 0.0,
            seed,
            features,
        })
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    /// `rule . sum_i feature(token_i)`.
    pub fn score(&self, rule: &[f64], tokens: &[usize]) -> f64 {
        rule.iter().zip(self.featurize(tokens)).map(|(r, f)| r * f).sum()
    }

    /// Random input sequence outside the margin band of `rule`.
    pub fn sample_clear(&self, rule: &[f64], rng: &mut StreamRng) -> Vec<usize> {
        let band = self.margin * libm::sqrt(self.seq_len as f64);
        loop {
            let tokens = self.sample_tokens(rng);
            if libm::fabs(self.score(rule, &tokens)) >= band {
                return tokens;
            }
        }
    }

    pub fn input_tokens(&self) -> core::ops::Range<usize> {
        self.num_labels..self.vocab
    }

    /// Summed latent features of a token sequence.
    pub fn featurize(&self, tokens: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.latent_dim];
        for &t in tokens {
            for (a, f) in acc.iter_mut().zip(&self.features[t]) {
                *a += f;
            }
        }
        acc
    }

    pub fn sample_tokens(&self, rng: &mut StreamRng) -> Vec<usize> {
        let range = self.input_tokens();
        (0..self.seq_len).map(|_| rng.gen_range(range.clone())).collect()
    }

    /// A random unit vector in latent space.
    pub fn random_rule(&self, rng: &mut StreamRng) -> Vec<f64> {
        normalize(normal_vec(rng, self.latent_dim, 1.0))
    }
}

/// A binary labelling task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub task_id: String,
    /// Unit vector in the world's latent space.
    pub rule: Vec<f64>,
    /// `[negative, positive]` label tokens.
    pub label_tokens: Vec<usize>,
    pub group: String,
    pub noise_rate: f64,
}

impl TaskSpec {
    pub fn validate(&self, world: &World) -> Result<()> {
        let labels_ok = self.label_tokens.len() == 2
            && self.label_tokens[0] != self.label_tokens[1]
            && self.label_tokens.iter().all(|&l| l < world.num_labels);
        if !labels_ok {
            return Err(Error::Config(format!(
                "task `{}` needs two distinct label tokens below {}",
                self.task_id, world.num_labels
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise rate {} outside [0, 0.5)", self.noise_rate)));
        }
        if self.rule.len() != world.latent_dim {
            return Err(Error::Config(format!("rule of task `{}` has wrong dimension", self.task_id)));
        }
        Ok(())
    }

    /// Noise-free label token for a token sequence.
    pub fn clean_label(&self, world: &World, tokens: &[usize]) -> usize {
        self.label_tokens[usize::from(world.score(&self.rule, tokens) > 0.0)]
    }

    /// Position of `label` within `label_tokens`.
    pub fn class_of(&self, label: usize) -> Option<usize> {
        self.label_tokens.iter().position(|&l| l == label)
    }
}

/// One labelled input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Vocabulary id of the label token.
    pub label: usize,
}

/// A task together with its generated splits.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// How a group's base rule is chosen.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RuleBase {
    /// A fresh random direction.
    Random,
    /// The negated base rule of an earlier group.
    Negate(String),
    /// The same base rule as an earlier group.
    Share(String),
}

/// A set of related tasks sharing one base rule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupSpec {
    pub name: String,
    pub size: usize,
    pub base: RuleBase,
    /// Rotation (radians) of each member's rule away from the base rule.
    pub spread: f64,
    pub label_tokens: Vec<usize>,
    pub noise_rate: f64,
}

impl GroupSpec {
    pub fn new(name: &str, size: usize, base: RuleBase, spread: f64) -> Self {
        Self {
            name: name.into(),
            size,
            base,
            spread,
            label_tokens: vec![0, 1],
            noise_rate: 0.0,
        }
    }

    pub fn with_labels(mut self, labels: [usize; 2]) -> Self {
        self.label_tokens = labels.to_vec();
        self
    }

    /// Task ids are `<group>-<index>`.
    pub fn task_ids(&self) -> Vec<String> {
        (0..self.size).map(|i| format!("{}-{i}", self.name)).collect()
    }
}

/// Description of a task family and its split sizes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FamilySpec {
    pub name: String,
    pub groups: Vec<GroupSpec>,
    pub train_pool: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl FamilySpec {
    pub fn task_ids(&self) -> Vec<String> {
        self.groups.iter().flat_map(GroupSpec::task_ids).collect()
    }

    /// Two related triples whose rules conflict with each other.
    pub fn two_conflicting_triples(spread: f64) -> Self {
        Self {
            name: "triples".into(),
            groups: vec![
                GroupSpec::new("a", 3, RuleBase::Random, spread),
                GroupSpec::new("b", 3, RuleBase::Negate("a".into()), spread),
            ],
            train_pool: 128,
            dev_size: 100,
            test_size: 100,
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Rotates unit vector `base` by `angle` towards a random orthogonal direction.
fn rotate_randomly(base: &[f64], angle: f64, rng: &mut StreamRng) -> Vec<f64> {
    if angle == 0.0 {
        return base.to_vec();
    }
    let raw = normal_vec(rng, base.len(), 1.0);
    let dot: f64 = raw.iter().zip(base).map(|(a, b)| a * b).sum();
    let ortho = normalize(raw.iter().zip(base).map(|(a, b)| a - dot * b).collect());
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    normalize(base.iter().zip(&ortho).map(|(b, o)| c * b + s * o).collect())
}

/// Generates balanced examples for `spec`, skipping any token sequence in `used`.
pub fn generate_examples(
    world: &World,
    spec: &TaskSpec,
    count: usize,
    used: &mut BTreeSet<Vec<usize>>,
    rng: &mut StreamRng,
) -> Vec<Example> {
    let classes = spec.label_tokens.len();
    let per_class: Vec<usize> = (0..classes)
        .map(|c| count / classes + usize::from(c < count % classes))
        .collect();
    let mut have = vec![0usize; classes];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let tokens = world.sample_clear(&spec.rule, rng);
        let clean = spec.clean_label(world, &tokens);
        let class = spec.class_of(clean).expect("label from spec");
        if have[class] >= per_class[class] || used.contains(&tokens) {
            continue;
        }
        let noisy: f64 = rng.gen();
        let label = if noisy < spec.noise_rate {
            spec.label_tokens[1 - class]
        } else {
            clean
        };
        have[class] += 1;
        used.insert(tokens.clone());
        out.push(Example { tokens, label });
    }
    out.shuffle(rng);
    out
}

/// Builds every task of a family with disjoint, class-balanced splits.
pub fn generate_task_family(world: &World, family: &FamilySpec, seed: u64) -> Result<Vec<TaskData>> {
    let mut bases: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut seen_ids = BTreeSet::new();
    let mut tasks = Vec::new();
    for group in &family.groups {
        let base = match &group.base {
            RuleBase::Random => {
                let mut rng = stream(seed, "group-rule", &[key_of(&family.name), key_of(&group.name)]);
                world.random_rule(&mut rng)
            }
            RuleBase::Negate(other) | RuleBase::Share(other) => {
                let b = bases
                    .get(other)
                    .ok_or_else(|| Error::Config(format!("group `{other}` must precede `{}`", group.name)))?;
                if matches!(group.base, RuleBase::Negate(_)) {
                    b.iter().map(|x| -x).collect()
                } else {
                    b.clone()
                }
            }
        };
        for (i, task_id) in group.task_ids().into_iter().enumerate() {
            if !seen_ids.insert(task_id.clone()) {
                return Err(Error::DuplicateTask(task_id));
            }
            let mut rng = stream(seed, "member-rule", &[key_of(&family.name), key_of(&task_id), i as u64]);
            let spec = TaskSpec {
                rule: rotate_randomly(&base, group.spread, &mut rng),
                task_id: task_id.clone(),
                label_tokens: group.label_tokens.clone(),
                group: group.name.clone(),
                noise_rate: group.noise_rate,
            };
            spec.validate(world)?;
            let mut rng = stream(seed, "examples", &[key_of(&family.name), key_of(&task_id)]);
            let mut used = BTreeSet::new();
            let test = generate_examples(world, &spec, family.test_size, &mut used, &mut rng);
            let dev = generate_examples(world, &spec, family.dev_size, &mut used, &mut rng);
            let train = generate_examples(world, &spec, family.train_pool, &mut used, &mut rng);
            tasks.push(TaskData { spec, train, dev, test });
        }
        bases.insert(group.name.clone(), base);
    }
    Ok(tasks)
}

/// Draws `k` class-balanced training examples from the task's pool.
pub fn sample_kshot(task: &TaskData, k: usize, seed: u64) -> Result<Vec<Example>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > task.train.len() {
        return Err(Error::NotEnoughExamples {
            requested: k,
            available: task.train.len(),
        });
    }
    let labels = &task.spec.label_tokens;
    let mut rng = stream(seed, "kshot", &[key_of(&task.spec.task_id), k as u64]);
    let mut by_class: Vec<Vec<&Example>> = labels
        .iter()
        .map(|&l| task.train.iter().filter(|e| e.label == l).collect())
        .collect();
    for bucket in &mut by_class {
        bucket.shuffle(&mut rng);
    }
    // Round-robin over classes so the draw stays balanced as far as k allows.
    let mut out = Vec::with_capacity(k);
    let mut cursor = vec![0usize; labels.len()];
    while out.len() < k {
        let before = out.len();
        for (c, bucket) in by_class.iter().enumerate() {
            if out.len() < k && cursor[c] < bucket.len() {
                out.push(bucket[cursor[c]].clone());
                cursor[c] += 1;
            }
        }
        if out.len() == before {
            break;
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(64, 4, 16, 8, 11).unwrap()
    }

    #[test]
    fn family_splits_are_disjoint_and_balanced() {
        let w = world();
        let fam = FamilySpec::two_conflicting_triples(0.1);
        let tasks = generate_task_family(&w, &fam, 3).unwrap();
        assert_eq!(tasks.len(), 6);
        for t in &tasks {
            let train: BTreeSet<_> = t.train.iter().map(|e| &e.tokens).collect();
            assert!(t.test.iter().all(|e| !train.contains(&e.tokens)));
            assert!(t.dev.iter().all(|e| !train.contains(&e.tokens)));
            let pos = t.test.iter().filter(|e| e.label == 1).count();
            assert_eq!(pos, 50);
        }
    }

    #[test]
    fn noiseless_labels_follow_the_rule() {
        let w = world();
        let tasks = generate_task_family(&w, &FamilySpec::two_conflicting_triples(0.2), 5).unwrap();
        for t in &tasks {
            for e in t.train.iter().chain(&t.test) {
                assert_eq!(t.spec.clean_label(&w, &e.tokens), e.label);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let fam = FamilySpec::two_conflicting_triples(0.2);
        assert_eq!(generate_task_family(&w, &fam, 1).unwrap(), generate_task_family(&w, &fam, 1).unwrap());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let w = world();
        let mut fam = FamilySpec::two_conflicting_triples(0.2);
        fam.groups[1].name = "a".into();
        fam.groups[1].base = RuleBase::Random;
        assert!(matches!(generate_task_family(&w, &fam, 1), Err(Error::DuplicateTask(_))));
    }

    #[test]
    fn negated_group_has_opposite_rules() {
        let w = world();
        let tasks = generate_task_family(&w, &FamilySpec::two_conflicting_triples(0.0), 2).unwrap();
        let a = &tasks[0].spec.rule;
        let b = &tasks[3].spec.rule;
        assert!(a.iter().zip(b).all(|(x, y)| x == &-y));
    }

    #[test]
    fn kshot_balance_and_errors() {
        let w = world();
        let tasks = generate_task_family(&w, &FamilySpec::two_conflicting_triples(0.2), 2).unwrap();
        let s = sample_kshot(&tasks[0], 8, 4).unwrap();
        assert_eq!(s.iter().filter(|e| e.label == 0).count(), 4);
        assert_eq!(s, sample_kshot(&tasks[0], 8, 4).unwrap());
        assert!(sample_kshot(&tasks[0], 0, 4).is_err());
        assert!(matches!(
            sample_kshot(&tasks[0], 10_000, 4),
            Err(Error::NotEnoughExamples { .. })
        ));
        let odd = sample_kshot(&tasks[0], 7, 4).unwrap();
        let zeros = odd.iter().filter(|e| e.label == 0).count();
        assert!(zeros == 3 || zeros == 4);
    }
}
