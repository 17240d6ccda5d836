//! Task-to-source attention weights.
//!
//! During training each weight is a Relaxed-Bernoulli (binary concrete)
//! sample driven by a learnable logit; the samples for one task are then
//! softmax-normalised across sources. At inference the logits are softmaxed
//! directly, with no sampling.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{sigmoid_scalar, softmax_slice, Tape, Var};
use crate::tensor::Tensor;

/// Learnable `tasks x sources` logits plus the current temperature.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouterState {
    pub logits: Tensor,
    pub temperature: f64,
}

/// Linear temperature decay from `tau_start` to `tau_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub const DEFAULT_START: f64 = 5.0;
    pub const DEFAULT_END: f64 = 1e-3;

    pub fn new(total_steps: usize) -> Self {
        Self {
            tau_start: Self::DEFAULT_START,
            tau_end: Self::DEFAULT_END,
            total_steps,
        }
    }

    /// Temperature at `step`. Steps past the end clamp to `tau_end` with a warning.
    pub fn anneal(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.tau_end;
        }
        if step > self.total_steps {
            log::warn!(
                "temperature step {step} beyond schedule length {}; clamping",
                self.total_steps
            );
            return self.tau_end;
        }
        if step == self.total_steps {
            return self.tau_end;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

impl RouterState {
    /// All-zero logits: every task starts with uniform attention.
    pub fn new(tasks: usize, sources: usize, temperature: f64) -> Self {
        Self {
            logits: Tensor::zeros(&[tasks, sources]),
            temperature,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_sources(&self) -> usize {
        self.logits.cols()
    }

    /// Softmax of the task's logits. Deterministic.
    pub fn inference_weights(&self, task: usize) -> Vec<f64> {
        softmax_slice(self.logits.row(task))
    }

    /// One training-mode draw: Relaxed-Bernoulli samples at the current
    /// temperature, softmax-normalised across sources.
    pub fn sample_weights(&self, task: usize, uniforms: &[f64]) -> Result<Vec<f64>> {
        let raw = relaxed_bernoulli(self.logits.row(task), uniforms, self.temperature)?;
        Ok(softmax_slice(&raw))
    }
}

/// Pre-normalisation samples `sigmoid((w + log(u / (1 - u))) / tau)`.
pub fn relaxed_bernoulli(logits: &[f64], uniforms: &[f64], tau: f64) -> Result<Vec<f64>> {
    let noise = logistic_noise(uniforms)?;
    if noise.len() != logits.len() {
        return Err(Error::Config(alloc::format!(
            "{} uniform draws for {} sources",
            noise.len(),
            logits.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(&noise)
        .map(|(w, n)| sigmoid_scalar((w + n) / tau))
        .collect())
}

/// Maps uniforms on (0, 1) to logistic noise `log(u / (1 - u))`.
pub fn logistic_noise(uniforms: &[f64]) -> Result<Vec<f64>> {
    uniforms
        .iter()
        .map(|&u| {
            if u > 0.0 && u < 1.0 {
                Ok(libm::log(u / (1.0 - u)))
            } else {
                Err(Error::UniformOutOfRange(u))
            }
        })
        .collect()
}

/// Uniform weights `[1/M; M]`, used when the router is switched off.
pub fn constant_weights(sources: usize) -> Vec<f64> {
    alloc::vec![1.0 / sources as f64; sources]
}

/// Records the sampled, normalised weights for `task` on the tape.
///
/// `logits` is the full `tasks x sources` leaf; the returned var is `1 x M`.
pub fn sample_weights_on_tape(
    tape: &mut Tape,
    logits: Var,
    task: usize,
    uniforms: &[f64],
    tau: f64,
) -> Result<Var> {
    let noise = logistic_noise(uniforms)?;
    let m = noise.len();
    let row = tape.slice_rows(logits, task, task + 1)?;
    let noise = tape.constant(Tensor::matrix(1, m, noise)?);
    let z = tape.add(row, noise)?;
    let z = tape.scale(z, 1.0 / tau);
    let w = tape.sigmoid(z);
    Ok(tape.softmax(w, 1)?)
}

/// Inference weights for `task` recorded on the tape (`1 x M`).
pub fn inference_weights_on_tape(tape: &mut Tape, logits: Var, task: usize) -> Result<Var> {
    let row = tape.slice_rows(logits, task, task + 1)?;
    Ok(tape.softmax(row, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = TemperatureSchedule::new(1000);
        assert_eq!(s.anneal(0), 5.0);
        assert_eq!(s.anneal(1000), 0.001);
        assert!((s.anneal(500) - 2.5005).abs() < 1e-12);
        assert_eq!(s.anneal(5000), 0.001);
        for step in 0..1000 {
            assert!(s.anneal(step + 1) < s.anneal(step));
        }
    }

    #[test]
    fn saturated_logit_stays_near_one() {
        for u in [0.011, 0.2, 0.5, 0.8, 0.989] {
            let w = relaxed_bernoulli(&[20.0], &[u], 0.01).unwrap();
            assert!(w[0] > 0.999, "u={u} gave {}", w[0]);
        }
    }

    #[test]
    fn median_noise_is_plain_sigmoid() {
        let w = relaxed_bernoulli(&[0.7, -1.3], &[0.5, 0.5], 0.25).unwrap();
        assert_eq!(w, vec![sigmoid_scalar(0.7 / 0.25), sigmoid_scalar(-1.3 / 0.25)]);
    }

    #[test]
    fn boundary_uniforms_are_rejected() {
        assert_eq!(relaxed_bernoulli(&[0.0], &[0.0], 1.0), Err(Error::UniformOutOfRange(0.0)));
        assert_eq!(relaxed_bernoulli(&[0.0], &[1.0], 1.0), Err(Error::UniformOutOfRange(1.0)));
    }

    #[test]
    fn inference_weights() {
        let mut r = RouterState::new(2, 3, 1.0);
        let w = r.inference_weights(0);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        r.logits = Tensor::matrix(2, 3, vec![10.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let a = r.inference_weights(1);
        r.logits.data_mut()[3..].iter_mut().for_each(|v| *v += 41.5);
        let b = r.inference_weights(1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_weights_are_uniform() {
        assert_eq!(constant_weights(2), vec![0.5, 0.5]);
        assert_eq!(constant_weights(1), vec![1.0]);
    }
}
