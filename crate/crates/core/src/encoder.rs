//! Per-token two-layer prompt encoder.
//!
//! Each prompt row `h` is mapped to `gelu(h W1 + b1) W2 + b2`. Weights are
//! stored input-major (`d x d`) so rows multiply from the left; there is no
//! mixing between prompt tokens.

use crate::error::{Error, Result};
use crate::rng::{normal_vec, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one encoder's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderParams {
    /// Kaiming-normal weights, zero biases.
    pub fn init(d: usize, rng: &mut StreamRng) -> Self {
        let std = libm::sqrt(2.0 / d as f64);
        Self {
            w1: Tensor::matrix(d, d, normal_vec(rng, d * d, std)).expect("d x d"),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::matrix(d, d, normal_vec(rng, d * d, std)).expect("d x d"),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.b2.len()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Encodes every row of `prompt` (`m x d`).
    pub fn encode(&self, prompt: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let p = tape.constant(prompt.clone());
        let out = encode_on_tape(&mut tape, &vars, p)?;
        Ok(tape.value(out).clone())
    }
}

impl EncoderVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub fn encode_on_tape(tape: &mut Tape, enc: &EncoderVars, prompt: Var) -> Result<Var> {
    let width = tape.value(enc.b2).len();
    let shape = tape.value(prompt).shape();
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::Config(alloc::format!(
            "encoder of width {width} cannot encode prompt of shape {shape:?}"
        )));
    }
    let h = tape.matmul(prompt, enc.w1)?;
    let h = tape.add_row(h, enc.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, enc.w2)?;
    Ok(tape.add_row(h, enc.b2)?)
}

/// All-zero encoder: every output row equals `b2`.
pub fn zero_encoder(d: usize) -> EncoderParams {
    EncoderParams {
        w1: Tensor::zeros(&[d, d]),
        b1: Tensor::zeros(&[d]),
        w2: Tensor::zeros(&[d, d]),
        b2: Tensor::zeros(&[d]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use alloc::vec::Vec;

    #[test]
    fn zero_weights_emit_the_output_bias() {
        let mut enc = zero_encoder(4);
        enc.b2 = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let mut rng = stream(0, "test", &[]);
        let prompt = Tensor::matrix(3, 4, normal_vec(&mut rng, 12, 1.0)).unwrap();
        let out = enc.encode(&prompt).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), enc.b2.data());
        }
    }

    #[test]
    fn rows_are_encoded_independently() {
        let mut rng = stream(7, "test", &[]);
        let enc = EncoderParams::init(5, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, 5, 1.0)).collect();
        let prompt = Tensor::from_rows(&rows).unwrap();
        let out = enc.encode(&prompt).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out_p = enc.encode(&Tensor::from_rows(&permuted).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_p.row(k), out.row(i));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = stream(1, "test", &[]);
        let enc = EncoderParams::init(4, &mut rng);
        assert!(enc.encode(&Tensor::zeros(&[2, 3])).is_err());
    }
}
