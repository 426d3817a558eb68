//! Seeded random streams.
//!
//! Every random decision in the pipeline draws from a generator derived from
//! the run seed plus a named stream and up to two indices, so that changing
//! one consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Mask,
    Negatives,
    KMedoids,
    KMeans,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::Mask => 0x6d61_736b,
            Stream::Negatives => 0x6e65_6773,
            Stream::KMedoids => 0x6b6d_6564,
            Stream::KMeans => 0x6b6d_6e73,
            Stream::Synthetic => 0x7379_6e74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the seed, stream tag and indices into a single 64-bit key.
pub fn derive_key(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream.tag());
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, stream, a, b))
}

/// Generator for a (seed, epoch, anchor) triple, used by negative sampling.
pub fn anchor_rng(seed: u64, epoch: u64, anchor: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, Stream::Negatives, epoch, 0);
    rng.set_stream(anchor);
    rng
}
