//! Blind estimation of intermittent sources observed through an unknown
//! flat-fading mixing matrix.
//!
//! The pipeline has two stages. Dictionary learning alternates a sparse
//! signal step ([`sparse`]) with a channel update ([`dictionary`]); the
//! per-source filter ([`psf`]) then quantizes each recovered row, smooths
//! the activity pattern with a two-state hidden Markov model observed
//! through a binary asymmetric channel, and nulls samples judged inactive.
//! [`evaluation`] scores the result and [`experiment`] drives seeded
//! Monte-Carlo runs.

pub mod dictionary;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod psf;
pub mod scenario;
pub mod sparse;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;
pub type CMatrix = nalgebra::DMatrix<C64>;
pub type CVector = nalgebra::DVector<C64>;

/// Mixes a base seed with a sequence of indices into a fresh 64-bit seed.
///
/// Every stochastic stage draws from its own derived stream so that
/// results do not depend on evaluation order.
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0x5eed_0f_b1_1d5e_9a7a);
    for &i in indices {
        state = splitmix64(state ^ splitmix64(i.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
