//! Keyed, counter-based random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream whose key
//! is derived from `(seed, purpose, indices...)`, so a draw depends only on
//! where it is made and never on how many draws happened elsewhere.
//!
//! Normal draws use a Box-Muller transform on `libm`, so sampled values do
//! not depend on which float-math backend other crates select.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use alloc::vec::Vec;

pub type StreamRng = ChaCha8Rng;

/// Opens the stream named `purpose` under `seed`, specialised by `keys`.
pub fn stream(seed: u64, purpose: &str, keys: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `n` i.i.d. draws from `Normal(0, std^2)`.
pub fn normal_vec(rng: &mut StreamRng, n: usize, std: f64) -> Vec<f64> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let radius = std * libm::sqrt(-2.0 * libm::log(open_unit(rng)));
        let angle = core::f64::consts::TAU * rng.gen::<f64>();
        out.push(radius * libm::cos(angle));
        out.push(radius * libm::sin(angle));
    }
    out.truncate(n);
    out
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit(rng: &mut StreamRng) -> f64 {
    use rand::Rng;
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Stable string-to-key mapping for use in `keys`.
pub fn key_of(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
