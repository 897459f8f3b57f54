//! CAN bus intrusion detection toolkit.
//!
//! The crate covers the full desk-scale pipeline: a CAN frame model with the
//! Car-Hacking-style CSV log format ([`can`]), a synthetic traffic generator
//! that injects DoS, fuzzy and spoofing attacks at fixed intervals ([`sim`]),
//! reproducible dataset splitting with balanced subsampling ([`dataset`]),
//! frame serialization and nibble-level tokenization ([`textify`]), tensor
//! kernels with hand-derived backward passes ([`nn`]), encoder/decoder
//! transformer classifiers ([`model`]), low-rank adaptation ([`lora`]),
//! AdamW training ([`train`]) and multi-class IDS metrics ([`metrics`]).
//!
//! All randomness flows from explicit seeds through ChaCha8 generators, so
//! captures, splits, training runs and checkpoints are bit-reproducible.

pub mod can;
pub mod dataset;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sim;
pub mod textify;
pub mod train;

/// Derives an independent sub-seed from a base seed and a salt (class index,
/// epoch number, ...) so that consumers never share RNG streams.
///
/// Uses the splitmix64 finalizer, which is a bijection on `u64` with good
/// avalanche behaviour.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash, used for vocabulary and checkpoint fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
