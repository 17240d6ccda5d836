//! Target-prompt composition from encoded private and source prompts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the private prompt is combined with the weighted source prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CompositionMethod {
    /// Plain prompt tuning: the private prompt alone.
    Pt,
    /// `P_u + sum_s w_s P_s`
    Ssum,
    /// `P_u * sum_s w_s P_s` (elementwise)
    Msum,
    /// `P_u * concat_s(w_s P_s)` (elementwise, rows stacked in source order)
    Mcat,
}

impl CompositionMethod {
    pub const ALL: [CompositionMethod; 4] = [Self::Pt, Self::Ssum, Self::Msum, Self::Mcat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pt => "pt",
            Self::Ssum => "ssum",
            Self::Msum => "msum",
            Self::Mcat => "mcat",
        }
    }

    pub fn uses_sources(self) -> bool {
        self != Self::Pt
    }

    /// Rows of the composed prompt.
    pub fn target_length(self, sources: usize, source_len: usize) -> usize {
        match self {
            Self::Mcat => sources * source_len,
            _ => source_len,
        }
    }

    /// Rows of each private prompt; equal to the target length.
    pub fn private_length(self, sources: usize, source_len: usize) -> usize {
        self.target_length(sources, source_len)
    }
}

impl fmt::Display for CompositionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompositionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pt" => Ok(Self::Pt),
            "ssum" => Ok(Self::Ssum),
            "msum" => Ok(Self::Msum),
            "mcat" => Ok(Self::Mcat),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

impl From<CompositionMethod> for String {
    fn from(m: CompositionMethod) -> String {
        m.as_str().to_string()
    }
}

const SIMPLEX_TOL: f64 = 1e-8;

fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w.is_nan() || w < -SIMPLEX_TOL) || libm::fabs(sum - 1.0) > SIMPLEX_TOL {
        return Err(Error::Config(alloc::format!("weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

/// Records the target prompt on the tape.
///
/// `weights` is a `1 x M` (or length-M) var. `sources` may be empty for PT.
/// No simplex check happens here; callers build weights from a softmax.
pub fn compose_on_tape(
    tape: &mut Tape,
    method: CompositionMethod,
    private: Var,
    sources: &[Var],
    weights: Option<Var>,
) -> Result<Var> {
    if method == CompositionMethod::Pt {
        return Ok(private);
    }
    let weights = weights.ok_or_else(|| Error::Config("composition needs source weights".into()))?;
    if sources.is_empty() || tape.value(weights).len() != sources.len() {
        return Err(Error::Config(alloc::format!(
            "{} sources but {} weights",
            sources.len(),
            tape.value(weights).len()
        )));
    }
    let mut scaled = Vec::with_capacity(sources.len());
    for (j, &s) in sources.iter().enumerate() {
        scaled.push(tape.scale_by(s, weights, j)?);
    }
    match method {
        CompositionMethod::Pt => unreachable!(),
        CompositionMethod::Ssum | CompositionMethod::Msum => {
            let mut mix = scaled[0];
            for &s in &scaled[1..] {
                mix = tape.add(mix, s)?;
            }
            if method == CompositionMethod::Ssum {
                Ok(tape.add(private, mix)?)
            } else {
                Ok(tape.mul(private, mix)?)
            }
        }
        CompositionMethod::Mcat => {
            let cat = tape.concat_rows(&scaled)?;
            Ok(tape.mul(private, cat)?)
        }
    }
}

/// Composes already-encoded prompts. Weights must lie on the simplex.
pub fn compose(
    method: CompositionMethod,
    private: &Tensor,
    sources: &[Tensor],
    weights: &[f64],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(private.clone());
    if method == CompositionMethod::Pt {
        return Ok(private.clone());
    }
    check_simplex(weights)?;
    let srcs: Vec<Var> = sources.iter().map(|s| tape.constant(s.clone())).collect();
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let out = compose_on_tape(&mut tape, method, p, &srcs, Some(w))?;
    Ok(tape.value(out).clone())
}
