//! Reproducible substream RNGs.
//!
//! Every stochastic component draws from a ChaCha stream addressed by
//! `(master seed, domain, index)`. Paths, network initialization, minibatch
//! shuffles and pilot runs all live in separate domains, so any component can
//! be re-run bit-identically regardless of thread scheduling or how many
//! draws the other components consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-domain tags. Kept in one place so no two components collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    FirstPassPath = 1,
    EstimatePath = 2,
    PilotPath = 3,
    NetworkInit = 4,
    Shuffle = 5,
    MlmcPath = 6,
    Test = 7,
}

/// 48 bits of index per domain.
const INDEX_BITS: u32 = 48;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// RNG for one `(seed, domain, index)` address.
pub fn substream(master_seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << INDEX_BITS, "substream index out of range");
    let mut state = master_seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((domain as u64) << INDEX_BITS) | index);
    rng
}
