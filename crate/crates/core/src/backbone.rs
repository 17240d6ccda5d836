//! Small encoder-only transformer standing in for a pretrained language model.
//!
//! Input tokens are embedded, the prompt rows are placed after (or before)
//! them, and the joint sequence passes through pre-residual multi-head
//! attention and GELU MLP blocks, each reading an RMS-normalised copy of the
//! residual stream. Final hidden states are mean-pooled over
//! visible positions and scored against the task's label tokens by a shared
//! vocabulary head. There are no positional embeddings: the synthetic tasks
//! are bag-of-token functions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive attention bias for hidden key positions.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Token vocabulary, label tokens included.
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Input tokens per example.
    pub seq_len: usize,
    pub max_prompt_len: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d: 64,
            layers: 2,
            heads: 4,
            seq_len: 16,
            max_prompt_len: 64,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.vocab == 0 || self.layers == 0 || self.seq_len == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Where prompt rows sit relative to the input tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PromptPosition {
    #[default]
    Append,
    Prepend,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// `d x vocab` output projection.
    pub head_w: Tensor,
    /// `1 x vocab` output bias.
    pub head_b: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Backbone parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

fn mat(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols, std)).expect("sized")
}

impl BackboneParams {
    /// Fresh, unfrozen, randomly initialised backbone.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let dh = config.head_dim();
        let mut rng = stream(seed, "backbone-init", &[]);
        let proj = 1.0 / libm::sqrt(d as f64);
        let out = 1.0 / libm::sqrt((d * config.layers) as f64);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: (0..config.heads).map(|_| mat(&mut rng, d, dh, proj)).collect(),
                wk: (0..config.heads).map(|_| mat(&mut rng, d, dh, proj)).collect(),
                wv: (0..config.heads).map(|_| mat(&mut rng, d, dh, proj)).collect(),
                wo: (0..config.heads).map(|_| mat(&mut rng, dh, d, out)).collect(),
                w1: mat(&mut rng, d, config.mlp_hidden, proj),
                b1: Tensor::zeros(&[config.mlp_hidden]),
                w2: mat(&mut rng, config.mlp_hidden, d, out),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: mat(&mut rng, config.vocab, d, 1.0),
            layers,
            head_w: mat(&mut rng, d, config.vocab, proj),
            head_b: Tensor::zeros(&[1, config.vocab]),
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding];
        for l in &self.layers {
            out.extend(l.wq.iter().chain(&l.wk).chain(&l.wv).chain(&l.wo));
            out.extend([&l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    /// Mutable view in the same order as [`BackboneParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend(l.wq.iter_mut());
            out.extend(l.wk.iter_mut());
            out.extend(l.wv.iter_mut());
            out.extend(l.wo.iter_mut());
            out.extend([&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    /// SHA-256 over the architecture and every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let c = &self.config;
        let mut h = Sha256::new();
        for v in [c.vocab, c.d, c.layers, c.heads, c.seq_len, c.max_prompt_len, c.mlp_hidden] {
            h.update((v as u64).to_le_bytes());
        }
        for t in self.tensors() {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registers the parameters; `trainable` controls gradient tracking.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let token_embedding = leaf(&self.token_embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: l.wq.iter().map(&mut leaf).collect(),
                wk: l.wk.iter().map(&mut leaf).collect(),
                wv: l.wv.iter().map(&mut leaf).collect(),
                wo: l.wo.iter().map(&mut leaf).collect(),
                w1: leaf(&l.w1),
                b1: leaf(&l.b1),
                w2: leaf(&l.w2),
                b2: leaf(&l.b2),
            })
            .collect();
        BackboneVars {
            token_embedding,
            layers,
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }

    /// Label-token logits for one example, evaluated without gradients.
    pub fn forward(
        &self,
        prompt: Option<&Tensor>,
        visible: Option<&[bool]>,
        tokens: &[usize],
        labels: &[usize],
        position: PromptPosition,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let head = LabelHead::register(&mut tape, &vars, labels)?;
        let p = prompt.map(|p| tape.constant(p.clone()));
        let out = forward_on_tape(&mut tape, &self.config, &vars, &head, p, visible, tokens, position)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend(l.wq.iter().chain(&l.wk).chain(&l.wv).chain(&l.wo));
            out.extend([l.w1, l.b1, l.w2, l.b2]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

/// The vocabulary head restricted to one task's label tokens.
#[derive(Debug, Clone, Copy)]
pub struct LabelHead {
    w: Var,
    b: Var,
}

impl LabelHead {
    pub fn register(tape: &mut Tape, vars: &BackboneVars, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            w: tape.gather_cols(vars.head_w, labels)?,
            b: tape.gather_cols(vars.head_b, labels)?,
        })
    }
}

/// Records one example's forward pass; returns `1 x labels` logits.
///
/// `visible` flags prompt rows the backbone may attend to and pool over;
/// `None` means all rows are visible.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &BackboneVars,
    head: &LabelHead,
    prompt: Option<Var>,
    visible: Option<&[bool]>,
    tokens: &[usize],
    position: PromptPosition,
) -> Result<Var> {
    let input = tape.embedding(vars.token_embedding, tokens)?;
    let prompt_len = prompt.map_or(0, |p| tape.value(p).rows());
    if prompt_len > config.max_prompt_len {
        return Err(Error::PromptTooLong {
            len: prompt_len,
            max: config.max_prompt_len,
        });
    }
    if let Some(vis) = visible {
        if vis.len() != prompt_len {
            return Err(Error::InvalidMask(format!(
                "{} visibility flags for a prompt of {prompt_len} rows",
                vis.len()
            )));
        }
    }

    let (mut h, prompt_offset) = match (prompt, position) {
        (None, _) => (input, 0),
        (Some(p), PromptPosition::Append) => (tape.concat_rows(&[input, p])?, tokens.len()),
        (Some(p), PromptPosition::Prepend) => (tape.concat_rows(&[p, input])?, 0),
    };
    let n = tokens.len() + prompt_len;
    let mut seen = vec![true; n];
    if let Some(vis) = visible {
        seen[prompt_offset..prompt_offset + prompt_len].copy_from_slice(vis);
    }
    let count = seen.iter().filter(|&&s| s).count();
    let key_bias = if seen.iter().all(|&s| s) {
        None
    } else {
        let row: Vec<f64> = seen.iter().map(|&s| if s { 0.0 } else { MASKED }).collect();
        let data = row.iter().copied().cycle().take(n * n).collect();
        Some(tape.constant(Tensor::matrix(n, n, data)?))
    };
    let pool: Vec<f64> = seen
        .iter()
        .map(|&s| if s { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let pool = tape.constant(Tensor::matrix(1, n, pool)?);

    let inv_sqrt_dh = 1.0 / libm::sqrt(config.head_dim() as f64);
    for layer in &vars.layers {
        let x = tape.rms_norm(h)?;
        let mut attn: Option<Var> = None;
        for head_idx in 0..config.heads {
            let q = tape.matmul(x, layer.wq[head_idx])?;
            let k = tape.matmul(x, layer.wk[head_idx])?;
            let v = tape.matmul(x, layer.wv[head_idx])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, inv_sqrt_dh);
            if let Some(bias) = key_bias {
                scores = tape.add(scores, bias)?;
            }
            let weights = tape.softmax(scores, 1)?;
            let mixed = tape.matmul(weights, v)?;
            let out = tape.matmul(mixed, layer.wo[head_idx])?;
            attn = Some(match attn {
                None => out,
                Some(acc) => tape.add(acc, out)?,
            });
        }
        h = tape.add(h, attn.expect("at least one head"))?;
        let x = tape.rms_norm(h)?;
        let m = tape.matmul(x, layer.w1)?;
        let m = tape.add_row(m, layer.b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, layer.w2)?;
        let m = tape.add_row(m, layer.b2)?;
        h = tape.add(h, m)?;
    }
    let h = tape.rms_norm(h)?;
    let pooled = tape.matmul(pool, h)?;
    let logits = tape.matmul(pooled, head.w)?;
    Ok(tape.add(logits, head.b)?)
}

/// Index of the largest logit (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 12,
            d: 8,
            layers: 2,
            heads: 2,
            seq_len: 5,
            max_prompt_len: 6,
            mlp_hidden: 12,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn masked_zero_prompt_equals_no_prompt() {
        let params = BackboneParams::init(&small(), 3).unwrap();
        let tokens = [4, 5, 6, 7, 11];
        let labels = [0, 1];
        let bare = params.forward(None, None, &tokens, &labels, PromptPosition::Append).unwrap();
        let zero = Tensor::zeros(&[4, 8]);
        let hidden = [false; 4];
        for pos in [PromptPosition::Append, PromptPosition::Prepend] {
            let masked = params.forward(Some(&zero), Some(&hidden), &tokens, &labels, pos).unwrap();
            assert_eq!(bare, masked, "{pos:?}");
        }
    }

    #[test]
    fn prompt_length_is_bounded() {
        let params = BackboneParams::init(&small(), 3).unwrap();
        let long = Tensor::zeros(&[7, 8]);
        let err = params
            .forward(Some(&long), None, &[4, 5, 6, 7, 8], &[0, 1], PromptPosition::Append)
            .unwrap_err();
        assert_eq!(err, Error::PromptTooLong { len: 7, max: 6 });
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = BackboneParams::init(&small(), 3).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.head_b.data_mut()[0] = 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn inference_is_deterministic() {
        let params = BackboneParams::init(&small(), 4).unwrap();
        let mut rng = stream(1, "t", &[]);
        let prompt = Tensor::matrix(3, 8, normal_vec(&mut rng, 24, 1.0)).unwrap();
        let f = || {
            params
                .forward(Some(&prompt), None, &[2, 3, 4, 5, 6], &[0, 1], PromptPosition::Append)
                .unwrap()
        };
        assert_eq!(f(), f());
    }
}
