//! Aligned contrastive training for a small multi-exit transformer encoder.
//!
//! The crate provides, from first principles:
//!
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff and
//!   a finite-difference gradient checker;
//! - [`model`]: a multi-exit pre-norm transformer encoder whose per-layer
//!   exits expose classifier columns as label embeddings, plus a bit-exact
//!   checkpoint format;
//! - [`losses`]: cross-entropy, supervised contrastive (SCL), label-embedding
//!   augmented contrastive (ACL-Embed), cross-layer contrastive distillation
//!   (ACL-CL), InfoNCE, and knowledge-distillation soft targets;
//! - [`gradalign`]: per-objective gradient extraction, gradient-angle
//!   computation, the angle-threshold gate (ACL-Grad), and angle histograms;
//! - [`train`]: AdamW with linear warmup/decay and the multi-exit training
//!   regimes (two-stage, joint, alternating, single-exit);
//! - [`infer`]: early-exit inference policies (fixed layer, entropy,
//!   patience) and layer-score curves;
//! - [`data`]: synthetic dataset generation, TSV ingestion, whitespace
//!   tokenization, and deterministic batching.

pub mod data;
pub mod error;
pub mod gradalign;
pub mod infer;
pub mod losses;
pub mod model;
pub mod records;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Derive a child seed from a base seed and a stream tag. FNV-1a over the
/// tag followed by a splitmix64 finalizer; stable across builds so that
/// artifacts are reproducible byte-for-byte.
pub fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
