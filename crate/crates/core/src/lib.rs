//! Bayesian uncertainty-guided self-training for unsupervised domain
//! adaptation in semantic segmentation.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autodiff`]), a
//! dual-head UNet-style network ([`model`]), the sampled Dice objective
//! ([`loss`]), the self-training loop and its baselines ([`selftrain`]), a
//! synthetic two-domain benchmark generator ([`synth`]), evaluation and
//! benchmarking ([`metrics`]) and the experiment commands behind the CLI
//! ([`commands`]).

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selftrain;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::{LabelMap, OneHot};
pub use tensor::{Element, Tensor};

use rand::SeedableRng;

/// Random generator used everywhere; ChaCha8 streams are stable across
/// platforms and crate versions.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stable sub-seed for a named stream (splitmix64 over the label bytes).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut state = master ^ 0x9E37_79B9_7F4A_7C15;
    let mut mix = |x: u64| {
        state = state.wrapping_add(x).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut h = mix(label.len() as u64);
    for chunk in label.as_bytes().chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h ^= mix(u64::from_le_bytes(buf));
    }
    h
}
