//! Deterministic random streams.
//!
//! Every random draw in the engine comes from a ChaCha8 generator keyed by the
//! run seed, a stream tag and up to two integer coordinates (typically the
//! iteration and the factor index). Work split across threads therefore sees
//! the same numbers as a single-threaded run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Named sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    DataShuffle,
    MonteCarlo,
    Minibatch,
    Metrics,
    Baseline,
    Test,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataShuffle => 0x5348_5546,
            Stream::MonteCarlo => 0x4d43_4d43,
            Stream::Minibatch => 0x4d42_4154,
            Stream::Metrics => 0x4d45_5452,
            Stream::Baseline => 0x4241_5345,
            Stream::Test => 0x5445_5354,
        }
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream, a, b)`.
pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut st = seed;
    let _ = splitmix(&mut st);
    st ^= stream.tag().wrapping_mul(0xff51_afd7_ed55_8ccd);
    let _ = splitmix(&mut st);
    st ^= a.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    let _ = splitmix(&mut st);
    st ^= b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut st).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
