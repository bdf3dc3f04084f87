//! Desk-scale laboratory for adversarial prompt tuning of a miniature
//! dual-encoder vision-language model: a reverse-mode autodiff substrate,
//! a two-tower patch/token transformer with deep multi-modal prompt
//! injection, a PGD attack, consistency-guided tuning objectives, and the
//! training/evaluation harness around them.

pub mod array;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod objectives;
pub mod pretrain;
pub mod tensor;
pub mod trainer;

pub use array::Array;
pub use tensor::{concat, grad_check, Tape, Tensor, TensorError};

/// Derive an independent stream seed from a base seed and a salt
/// (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
