//! Counter-addressed random streams.
//!
//! Every random draw in a run is addressed by `(seed, domain, major, minor)`,
//! e.g. `(seed, Brownian, slab, particle)`. A stream is a ChaCha8 generator
//! keyed by `(seed, domain)` and positioned on ChaCha stream `major << 32 | minor`,
//! so any stream can be rebuilt from its address alone, in any order, on any
//! thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the purposes random numbers are drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamDomain {
    /// Wiener increments of the fine propagator, addressed by `(slab, particle)`.
    Brownian,
    /// Standard-normal resampling inside the matching operator, addressed by
    /// `(iteration, time index)`.
    Resample,
    /// Initial ensemble draws.
    Initial,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::Brownian => 0x42_52_4f_57_4e,
            StreamDomain::Resample => 0x52_45_53_41_4d,
            StreamDomain::Initial => 0x49_4e_49_54,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Opens the stream at the given address.
pub fn stream(seed: u64, domain: StreamDomain, major: u32, minor: u32) -> ChaCha8Rng {
    let mut state = seed ^ domain.tag().rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((u64::from(major) << 32) | u64::from(minor));
    rng
}
