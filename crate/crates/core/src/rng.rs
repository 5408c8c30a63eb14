//! Counter-based random streams.
//!
//! Every random draw in a simulation comes from a stream identified by
//! `(master seed, purpose, a, b, c)`. The key is hashed into a ChaCha8 seed,
//! so a stream's contents depend only on its key and never on how many other
//! streams were consumed before it. This is what makes client training
//! order-independent and lets diagnostics replay rounds without perturbing
//! the training randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    TestData = 2,
    Partition = 3,
    Availability = 4,
    Batch = 5,
    Init = 6,
    Replay = 7,
    Probe = 8,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed plus the derivation rule for named streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngContract {
    master: u64,
}

impl RngContract {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// 256-bit key for the stream `(purpose, a, b, c)`.
    pub fn key(&self, purpose: Purpose, a: u64, b: u64, c: u64) -> [u8; 32] {
        let mut h = mix64(self.master.wrapping_add(GOLDEN));
        for word in [purpose as u64, a, b, c] {
            h = mix64(h ^ word.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
        }
        let mut seed = [0u8; 32];
        let mut s = h;
        for chunk in seed.chunks_exact_mut(8) {
            s = s.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(s).to_le_bytes());
        }
        seed
    }

    pub fn stream(&self, purpose: Purpose, a: u64, b: u64, c: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key(purpose, a, b, c))
    }

    /// Stream for one local step of one client in one round. `replay` is 0
    /// for training and `r + 1` for the r-th diagnostic replay.
    pub fn batch_stream(&self, client: usize, iteration: usize, replay: u64) -> ChaCha8Rng {
        if replay == 0 {
            self.stream(Purpose::Batch, client as u64, iteration as u64, 0)
        } else {
            self.stream(Purpose::Replay, client as u64, iteration as u64, replay)
        }
    }
}
