//! Named random streams derived from one experiment seed.
//!
//! Each subsystem draws from its own stream, so adding draws in one place
//! never shifts the numbers another subsystem sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Pools,
    Negatives,
    Order,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Init => "init",
            Stream::Pools => "pools",
            Stream::Negatives => "negatives",
            Stream::Order => "order",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    seed: u64,
}

impl SeedSplitter {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, s: Stream) -> Rng {
        self.named(s.name())
    }

    pub fn named(&self, name: &str) -> Rng {
        Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
