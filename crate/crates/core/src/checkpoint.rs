//! Serializable snapshot of a trained prompt model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compose::CompositionMethod;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::model::{PromptModel, WeightsMode};
use crate::prompt::{PromptBank, SoftPrompt};
use crate::router::RouterState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

/// Encoder weights as nested arrays.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderRecord {
    pub w1: Rows,
    pub b1: Vec<f64>,
    pub w2: Rows,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderSet {
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub sources: Vec<EncoderRecord>,
    pub privates: BTreeMap<String, EncoderRecord>,
}

/// Everything needed to rebuild a [`PromptModel`] and check it belongs to a backbone.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptCheckpoint {
    pub format_version: u32,
    pub method: CompositionMethod,
    pub weights_mode: WeightsMode,
    pub source_len: usize,
    pub private_len: usize,
    pub d: usize,
    /// Router row order.
    pub tasks: Vec<String>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub sources: Vec<Rows>,
    pub privates: BTreeMap<String, Rows>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub router_logits: Option<Rows>,
    pub encoders: EncoderSet,
    pub backbone_sha256: String,
    pub seed: u64,
}

fn encoder_record(e: &EncoderParams) -> EncoderRecord {
    EncoderRecord {
        w1: e.w1.to_rows(),
        b1: e.b1.data().to_vec(),
        w2: e.w2.to_rows(),
        b2: e.b2.data().to_vec(),
    }
}

fn matrix(rows: &Rows, what: &str) -> Result<Tensor> {
    Tensor::from_rows(rows).map_err(|e| Error::MalformedCheckpoint(format!("{what}: {e}")))
}

fn encoder_params(r: &EncoderRecord, d: usize, what: &str) -> Result<EncoderParams> {
    let e = EncoderParams {
        w1: matrix(&r.w1, what)?,
        b1: Tensor::vector(r.b1.clone()),
        w2: matrix(&r.w2, what)?,
        b2: Tensor::vector(r.b2.clone()),
    };
    let square = |t: &Tensor| t.shape() == [d, d];
    if !square(&e.w1) || !square(&e.w2) || e.b1.len() != d || e.b2.len() != d {
        return Err(Error::MalformedCheckpoint(format!("{what}: encoder is not {d} wide")));
    }
    Ok(e)
}

impl PromptCheckpoint {
    pub fn from_model(model: &PromptModel, backbone_sha256: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method: model.method,
            weights_mode: model.weights_mode,
            source_len: model.bank.source_len,
            private_len: model.bank.private_len,
            d: model.bank.d,
            tasks: model.tasks.clone(),
            sources: model.bank.sources.iter().map(|s| s.tokens.to_rows()).collect(),
            privates: model
                .bank
                .privates
                .iter()
                .map(|(id, p)| (id.clone(), p.tokens.to_rows()))
                .collect(),
            router_logits: model.router.as_ref().map(|r| r.logits.to_rows()),
            encoders: EncoderSet {
                sources: model.source_encoders.iter().map(encoder_record).collect(),
                privates: model
                    .private_encoders
                    .iter()
                    .map(|(id, e)| (id.clone(), encoder_record(e)))
                    .collect(),
            },
            backbone_sha256: backbone_sha256.into(),
            seed,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    pub fn check_backbone(&self, fingerprint: &str) -> Result<()> {
        if self.backbone_sha256 != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint.into(),
                found: self.backbone_sha256.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the model, validating every shape.
    pub fn to_model(&self) -> Result<PromptModel> {
        self.check_version()?;
        let d = self.d;
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(s, rows)| {
                Ok(SoftPrompt {
                    id: format!("source-{s}"),
                    tokens: matrix(rows, "source prompt")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut privates = BTreeMap::new();
        for (id, rows) in &self.privates {
            let tokens = matrix(rows, "private prompt")?;
            privates.insert(
                id.clone(),
                SoftPrompt {
                    id: format!("private-{id}"),
                    tokens,
                },
            );
        }
        let bank = PromptBank {
            sources,
            privates,
            source_len: self.source_len,
            private_len: self.private_len,
            d,
        };
        bank.validate(self.method)
            .map_err(|e| Error::MalformedCheckpoint(format!("{e}")))?;
        if self.tasks.len() != bank.privates.len() || self.tasks.iter().any(|t| !bank.privates.contains_key(t)) {
            return Err(Error::MalformedCheckpoint("task list does not match private prompts".into()));
        }
        if self.encoders.sources.len() != bank.sources.len() {
            return Err(Error::MalformedCheckpoint("one encoder per source prompt expected".into()));
        }
        let source_encoders = self
            .encoders
            .sources
            .iter()
            .map(|r| encoder_params(r, d, "source encoder"))
            .collect::<Result<Vec<_>>>()?;
        let mut private_encoders = BTreeMap::new();
        for id in &self.tasks {
            let r = self
                .encoders
                .privates
                .get(id)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("no encoder for task `{id}`")))?;
            private_encoders.insert(id.clone(), encoder_params(r, d, "private encoder")?);
        }
        let router = match (&self.router_logits, self.method.uses_sources()) {
            (Some(rows), true) => {
                let logits = matrix(rows, "router logits")?;
                if logits.shape() != [self.tasks.len(), bank.sources.len()] {
                    return Err(Error::MalformedCheckpoint("router logits have the wrong shape".into()));
                }
                Some(RouterState {
                    logits,
                    temperature: crate::router::TemperatureSchedule::DEFAULT_END,
                })
            }
            (None, false) => None,
            (Some(_), false) => {
                return Err(Error::MalformedCheckpoint("plain prompt tuning has no router".into()))
            }
            (None, true) => return Err(Error::MalformedCheckpoint("router logits missing".into())),
        };
        Ok(PromptModel {
            method: self.method,
            weights_mode: self.weights_mode,
            tasks: self.tasks.clone(),
            bank,
            source_encoders,
            private_encoders,
            router,
        })
    }
}
