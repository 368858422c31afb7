//! In-context voice conversion on a synthetic toy-mel domain.
//!
//! A flow-matching generator is trained to reconstruct masked mel frames from
//! k-means semantic tokens, the unmasked mel context and (optionally) prosody
//! features. At conversion time a reference utterance is placed in front of the
//! source as a prompt and the source span is generated, so the output carries
//! the source content with the reference timbre.
//!
//! Module map:
//!
//! * [`backbone`]: bidirectional transformer vector field with hand-written
//!   reverse-mode gradients.
//! * [`flow`]: optimal-transport conditional paths, masked CFM loss, fixed-step
//!   ODE integration.
//! * [`tokenizer`]: k-means codebooks and the learnable token embedding.
//! * [`icl`]: training masks and inference prompt assembly.
//! * [`prosody`]: contours, normalization, 256-bin tokens, cents perturbation
//!   and prosody-embedding providers.
//! * [`synthdata`]: the factorized toy corpus and its closed-form probes.
//! * [`eval`]: cosine similarity, Pearson correlation and conversion reports.
//! * [`model`] and [`train`]: the full conditioned generator and its optimizer.

pub mod backbone;
pub mod container;
pub mod error;
pub mod eval;
pub mod flow;
pub mod icl;
pub mod model;
pub mod pipeline;
pub mod prosody;
pub mod real;
pub mod synthdata;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

/// Time-major matrix of per-frame feature vectors.
pub type Tensor2D<F = f64> = ndarray::Array2<F>;

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
