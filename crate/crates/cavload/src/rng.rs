//! Deterministic random-number streams.
//!
//! Every atom owns a private ChaCha stream derived from the run seed and its
//! atom id, so stochastic updates commute across worker counts: results are
//! bit-identical whether the atom loop runs on 1 thread or 8. ChaCha is a
//! counter-mode cipher, which makes stream selection cheap and collision-free.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used to derive independent sub-seeds.
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    *state = z ^ (z >> 31);
}

/// Derive the seed for run `run_index` of a scan from the master seed.
pub fn derive_run_seed(master_seed: u64, run_index: u64) -> u64 {
    let mut state = master_seed ^ run_index.wrapping_mul(0xA076_1D64_78BD_642F);
    splitmix64(&mut state);
    splitmix64(&mut state);
    state
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut state = seed;
    for chunk in out.chunks_exact_mut(8) {
        splitmix64(&mut state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    out
}

/// Stream reserved for trace-level draws (detector noise).
pub const TRACE_STREAM: u64 = 0;

/// Private stream for atom `id`. Streams 1.. are atom streams.
pub fn atom_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed));
    rng.set_stream((id + 1) as u128);
    rng
}

pub fn trace_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed));
    rng.set_stream(TRACE_STREAM as u128);
    rng
}
