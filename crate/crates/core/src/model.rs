//! The complete trainable prompt state and how it turns into target prompts.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compose::{compose, CompositionMethod};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::prompt::{PromptBank, SourceMask};
use crate::rng::{key_of, stream};
use crate::router::{constant_weights, RouterState};
use crate::tensor::Tensor;

/// Whether source weights come from the router or are fixed and uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WeightsMode {
    #[default]
    Learned,
    Constant,
}

impl core::str::FromStr for WeightsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "constant" => Ok(Self::Constant),
            other => Err(Error::Config(alloc::format!("unknown weights mode `{other}`"))),
        }
    }
}

/// Prompts, their encoders and the router for one multi-task run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptModel {
    pub method: CompositionMethod,
    pub weights_mode: WeightsMode,
    /// Task order; row `i` of the router belongs to `tasks[i]`.
    pub tasks: Vec<String>,
    pub bank: PromptBank,
    pub source_encoders: Vec<EncoderParams>,
    pub private_encoders: BTreeMap<String, EncoderParams>,
    pub router: Option<RouterState>,
}

/// A target prompt ready for the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPrompt {
    pub tokens: Tensor,
    /// Rows hidden from the backbone's attention, if any.
    pub visible: Option<Vec<bool>>,
}

impl PromptModel {
    pub fn init(
        method: CompositionMethod,
        weights_mode: WeightsMode,
        tasks: &[String],
        num_sources: usize,
        source_len: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let bank = PromptBank::init(num_sources, tasks, source_len, d, method, seed)?;
        let source_encoders = (0..bank.num_sources())
            .map(|s| EncoderParams::init(d, &mut stream(seed, "encoder-init", &[0, s as u64])))
            .collect();
        let private_encoders = tasks
            .iter()
            .map(|t| {
                let enc = EncoderParams::init(d, &mut stream(seed, "encoder-init", &[1, key_of(t)]));
                (t.clone(), enc)
            })
            .collect();
        let router = method
            .uses_sources()
            .then(|| RouterState::new(tasks.len(), bank.num_sources(), 1.0));
        Ok(Self {
            method,
            weights_mode,
            tasks: tasks.to_vec(),
            bank,
            source_encoders,
            private_encoders,
            router,
        })
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::UnknownTask(task.into()))
    }

    pub fn num_sources(&self) -> usize {
        self.bank.num_sources()
    }

    /// Inference-time source weights for a task (`None` for PT).
    pub fn source_weights(&self, task_idx: usize) -> Option<Vec<f64>> {
        if !self.method.uses_sources() {
            return None;
        }
        Some(match (self.weights_mode, &self.router) {
            (WeightsMode::Learned, Some(router)) => router.inference_weights(task_idx),
            _ => constant_weights(self.num_sources()),
        })
    }

    pub fn encoded_private(&self, task: &str) -> Result<Tensor> {
        let enc = self
            .private_encoders
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.into()))?;
        enc.encode(&self.bank.private(task)?.tokens)
    }

    pub fn encoded_sources(&self) -> Result<Vec<Tensor>> {
        self.bank
            .sources
            .iter()
            .zip(&self.source_encoders)
            .map(|(s, e)| e.encode(&s.tokens))
            .collect()
    }

    /// Deterministic target prompt for `task`, optionally with some prompts masked.
    ///
    /// SSUM/MSUM: masked sources drop out and the kept sources' weights are
    /// renormalised; a masked private prompt becomes zero. MCAT: masked source
    /// segments are hidden through the backbone's attention mask.
    pub fn target_prompt(&self, task: &str, mask: Option<&SourceMask>) -> Result<ComposedPrompt> {
        let task_idx = self.task_index(task)?;
        let mask = mask.filter(|m| !m.is_identity());
        if let Some(m) = mask {
            if !self.method.uses_sources() {
                return Err(Error::InvalidMask("plain prompt tuning has nothing to mask".into()));
            }
            if m.num_sources() != self.num_sources() {
                return Err(Error::InvalidMask(alloc::format!(
                    "mask built for {} sources, model has {}",
                    m.num_sources(),
                    self.num_sources()
                )));
            }
        }

        let mut private = self.encoded_private(task)?;
        if mask.is_some_and(|m| !m.keep_private()) {
            private = Tensor::zeros(private.shape());
        }
        let Some(weights) = self.source_weights(task_idx) else {
            return Ok(ComposedPrompt {
                tokens: private,
                visible: None,
            });
        };
        let sources = self.encoded_sources()?;

        match (self.method, mask) {
            (CompositionMethod::Mcat, m) => {
                let tokens = compose(self.method, &private, &sources, &weights)?;
                let visible = m.map(|m| m.concat_visibility(self.bank.source_len));
                Ok(ComposedPrompt { tokens, visible })
            }
            (_, None) => Ok(ComposedPrompt {
                tokens: compose(self.method, &private, &sources, &weights)?,
                visible: None,
            }),
            (_, Some(m)) => {
                let kept: Vec<usize> = m.kept().collect();
                let tokens = if kept.is_empty() {
                    let zero = Tensor::zeros(private.shape());
                    compose(self.method, &private, &[zero], &[1.0])?
                } else {
                    let renorm = m.renormalize(&weights);
                    let masked: Vec<Tensor> = sources
                        .into_iter()
                        .enumerate()
                        .map(|(s, t)| if m.keeps(s) { t } else { Tensor::zeros(t.shape()) })
                        .collect();
                    compose(self.method, &private, &masked, &renorm)?
                };
                Ok(ComposedPrompt { tokens, visible: None })
            }
        }
    }

    /// Rows of the composed prompt.
    pub fn target_len(&self) -> usize {
        self.method.target_length(self.num_sources(), self.bank.source_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("t{i}")).collect()
    }

    #[test]
    fn full_mask_is_identity() {
        for method in [CompositionMethod::Ssum, CompositionMethod::Msum, CompositionMethod::Mcat] {
            let mut m = PromptModel::init(method, WeightsMode::Learned, &ids(2), 3, 4, 6, 1).unwrap();
            let r = m.router.as_mut().unwrap();
            r.logits.data_mut().copy_from_slice(&[0.3, -1.0, 2.0, 0.1, 0.2, 0.3]);
            let plain = m.target_prompt("t1", None).unwrap();
            let masked = m.target_prompt("t1", Some(&SourceMask::full(3))).unwrap();
            assert_eq!(plain, masked);
        }
    }

    #[test]
    fn ssum_without_sources_is_the_private_prompt() {
        let m = PromptModel::init(CompositionMethod::Ssum, WeightsMode::Learned, &ids(2), 2, 4, 6, 1).unwrap();
        let mask = SourceMask::new([], true, 2).unwrap();
        let out = m.target_prompt("t0", Some(&mask)).unwrap();
        assert_eq!(out.tokens, m.encoded_private("t0").unwrap());
    }

    #[test]
    fn msum_without_private_is_zero() {
        let m = PromptModel::init(CompositionMethod::Msum, WeightsMode::Learned, &ids(1), 2, 4, 6, 1).unwrap();
        let mask = SourceMask::new([0, 1], false, 2).unwrap();
        let out = m.target_prompt("t0", Some(&mask)).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_kept_source_gets_full_weight() {
        let mut m = PromptModel::init(CompositionMethod::Ssum, WeightsMode::Learned, &ids(1), 2, 4, 6, 1).unwrap();
        m.router.as_mut().unwrap().logits.data_mut().copy_from_slice(&[1.5, -0.5]);
        let mask = SourceMask::new([0], false, 2).unwrap();
        let out = m.target_prompt("t0", Some(&mask)).unwrap();
        let src = &m.encoded_sources().unwrap()[0];
        assert!(out.tokens.max_abs_diff(src) <= 1e-15);
    }

    #[test]
    fn pt_rejects_masks_and_unknown_tasks() {
        let m = PromptModel::init(CompositionMethod::Pt, WeightsMode::Learned, &ids(1), 2, 4, 6, 1).unwrap();
        assert!(m.router.is_none() && m.bank.sources.is_empty());
        let mask = SourceMask::new([], true, 0).unwrap();
        assert!(m.target_prompt("t0", Some(&mask)).is_ok());
        assert!(matches!(m.target_prompt("zzz", None), Err(Error::UnknownTask(_))));
    }
}
