//! Seed derivation.
//!
//! Every stochastic choice in a run draws from its own generator whose seed is
//! a pure function of `(master, repeat, round, client, purpose)`. Nothing is
//! shared between clients or arms, so execution order cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

/// What a derived generator is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    LocalTrain = 3,
    Privacy = 4,
    Behavior = 5,
    Placement = 6,
    Selection = 7,
    Malicious = 8,
    Validation = 9,
    SecureAgg = 10,
}

const NONE: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Coordinates of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPath {
    pub master: u64,
    pub repeat: Option<usize>,
    pub round: Option<usize>,
    pub client: Option<usize>,
}

impl SeedPath {
    pub fn new(master: u64) -> Self {
        SeedPath { master, repeat: None, round: None, client: None }
    }

    pub fn repeat(self, r: usize) -> Self {
        SeedPath { repeat: Some(r), ..self }
    }

    pub fn round(self, r: usize) -> Self {
        SeedPath { round: Some(r), ..self }
    }

    pub fn client(self, c: usize) -> Self {
        SeedPath { client: Some(c), ..self }
    }

    pub fn seed(&self, purpose: Purpose) -> u64 {
        let opt = |v: Option<usize>| v.map_or(NONE, |v| v as u64);
        mix(&[self.master, opt(self.repeat), opt(self.round), opt(self.client), purpose as u64])
    }

    pub fn rng(&self, purpose: Purpose) -> SimRng {
        SimRng::seed_from_u64(self.seed(purpose))
    }
}
