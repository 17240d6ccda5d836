//! Trainable prompt state: shared source prompts, per-task private prompts,
//! and the masks used to isolate them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::compose::CompositionMethod;
use crate::error::{Error, Result};
use crate::rng::{key_of, normal_vec, stream};
use crate::tensor::Tensor;

/// Standard deviation of freshly initialised prompt entries.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// An `m x d` matrix of prompt-token embeddings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SoftPrompt {
    pub id: String,
    pub tokens: Tensor,
}

impl SoftPrompt {
    pub fn random(id: impl Into<String>, len: usize, d: usize, seed: u64) -> Self {
        let id = id.into();
        let mut rng = stream(seed, "prompt-init", &[key_of(&id)]);
        let data = normal_vec(&mut rng, len * d, PROMPT_INIT_STD);
        Self {
            tokens: Tensor::matrix(len, d, data).expect("len x d"),
            id,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// `M` shared source prompts plus one private prompt per task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptBank {
    pub sources: Vec<SoftPrompt>,
    pub privates: BTreeMap<String, SoftPrompt>,
    pub source_len: usize,
    pub private_len: usize,
    pub d: usize,
}

impl PromptBank {
    /// Random bank with entries drawn from `Normal(0, 0.02^2)`.
    ///
    /// MCAT private prompts span all source segments (`M * source_len` rows);
    /// PT keeps no sources at all.
    pub fn init(
        num_sources: usize,
        task_ids: &[String],
        source_len: usize,
        d: usize,
        method: CompositionMethod,
        seed: u64,
    ) -> Result<Self> {
        if method.uses_sources() && num_sources == 0 {
            return Err(Error::Config("at least one source prompt is required".into()));
        }
        if task_ids.is_empty() || source_len == 0 || d == 0 {
            return Err(Error::Config("bank needs tasks, a prompt length and a width".into()));
        }
        let num_sources = if method.uses_sources() { num_sources } else { 0 };
        let private_len = method.private_length(num_sources, source_len);
        let sources = (0..num_sources)
            .map(|s| SoftPrompt::random(alloc::format!("source-{s}"), source_len, d, seed))
            .collect();
        let mut privates = BTreeMap::new();
        for id in task_ids {
            let prompt = SoftPrompt::random(alloc::format!("private-{id}"), private_len, d, seed);
            if privates.insert(id.clone(), prompt).is_some() {
                return Err(Error::DuplicateTask(id.clone()));
            }
        }
        Ok(Self {
            sources,
            privates,
            source_len,
            private_len,
            d,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn private(&self, task: &str) -> Result<&SoftPrompt> {
        self.privates
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.into()))
    }

    /// Checks the length invariants for `method`.
    pub fn validate(&self, method: CompositionMethod) -> Result<()> {
        let ok_sources = self
            .sources
            .iter()
            .all(|s| s.len() == self.source_len && s.width() == self.d);
        let ok_privates = self
            .privates
            .values()
            .all(|p| p.len() == self.private_len && p.width() == self.d);
        let expected_private = method.private_length(self.num_sources(), self.source_len);
        if !ok_sources || !ok_privates || self.private_len != expected_private {
            return Err(Error::Config(alloc::format!(
                "bank lengths inconsistent with {method}: sources {} rows, privates {} rows",
                self.source_len,
                self.private_len
            )));
        }
        Ok(())
    }
}

/// Which prompts stay active during an isolation evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SourceMask {
    keep: BTreeSet<usize>,
    keep_private: bool,
    num_sources: usize,
}

impl SourceMask {
    pub fn new(
        keep: impl IntoIterator<Item = usize>,
        keep_private: bool,
        num_sources: usize,
    ) -> Result<Self> {
        let keep: BTreeSet<usize> = keep.into_iter().collect();
        if let Some(&bad) = keep.iter().find(|&&s| s >= num_sources) {
            return Err(Error::InvalidMask(alloc::format!(
                "source {bad} out of range for {num_sources} sources"
            )));
        }
        if keep.is_empty() && !keep_private {
            return Err(Error::InvalidMask("mask would hide every prompt".into()));
        }
        Ok(Self {
            keep,
            keep_private,
            num_sources,
        })
    }

    /// Keeps everything.
    pub fn full(num_sources: usize) -> Self {
        Self {
            keep: (0..num_sources).collect(),
            keep_private: true,
            num_sources,
        }
    }

    pub fn keeps(&self, source: usize) -> bool {
        self.keep.contains(&source)
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().copied()
    }

    pub fn keep_private(&self) -> bool {
        self.keep_private
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn is_identity(&self) -> bool {
        self.keep_private && self.keep.len() == self.num_sources
    }

    /// Source weights with masked entries zeroed and the kept ones rescaled
    /// to sum to one. The full mask returns `weights` untouched.
    pub fn renormalize(&self, weights: &[f64]) -> Vec<f64> {
        if self.keep.len() == self.num_sources {
            return weights.to_vec();
        }
        let total: f64 = self.keep.iter().map(|&s| weights[s]).sum();
        weights
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                if !self.keeps(s) {
                    0.0
                } else if total > 0.0 {
                    w / total
                } else {
                    1.0 / self.keep.len() as f64
                }
            })
            .collect()
    }

    /// Per-row visibility of a concatenated (MCAT) target prompt: rows of
    /// masked source segments are hidden from the backbone's attention.
    pub fn concat_visibility(&self, source_len: usize) -> Vec<bool> {
        (0..self.num_sources * source_len)
            .map(|row| self.keeps(row / source_len))
            .collect()
    }
}
