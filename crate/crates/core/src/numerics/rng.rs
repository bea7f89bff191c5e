//! Seeded, counter-based random streams.
//!
//! Every consumer asks for its own stream by a stable path of integer tags
//! (client id, round, epoch, ...), so the numbers a client draws never depend
//! on how many draws another client made or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of a tree of reproducible random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `tag`; distinct tags give unrelated seeds.
    pub fn fork(&self, tag: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Follows a path of tags, e.g. `[client, round, epoch]`.
    pub fn path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(*self, |s, &t| s.fork(t))
    }

    /// ChaCha8 generator on the given stream number of this seed.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Stream tags used across the crate.
pub mod tags {
    pub const EXTRACTOR: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const DATA: u64 = 5;
    pub const AUDIT: u64 = 6;
}
