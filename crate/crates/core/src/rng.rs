//! Seeded, counter-addressed random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, purpose)` and positioned by two indices (for example pair and
//! replicate), so any single draw can be regenerated without replaying the
//! others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Noise = 1,
    Prior = 2,
    Split = 3,
    Observation = 4,
    Conditional = 5,
    Folds = 6,
    Mask = 7,
    Optimizer = 8,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose)` at position `(major, minor)`. Both indices
/// must fit in 32 bits.
pub fn stream_rng(seed: u64, purpose: Purpose, major: u64, minor: u64) -> ChaCha8Rng {
    assert!(major >> 32 == 0 && minor >> 32 == 0, "stream index out of range");
    let mut state = seed ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((major << 32) | minor);
    rng
}

pub fn standard_normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
