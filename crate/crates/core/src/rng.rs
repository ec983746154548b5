//! Counter-based random streams.
//!
//! A stream is a pure function of its [`RngKey`]. Two draws with the same key
//! see the same numbers no matter which samples were processed first, which is
//! what makes augmentation order-independent and training resumable from any
//! step.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for. Occupies the `op` slot of the key so that
/// different consumers at the same coordinates never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Queue = 2,
    Shuffle = 3,
    AugmentView1 = 4,
    AugmentView2 = 5,
    MixSpec = 6,
    Synth = 7,
    Probe = 8,
    Split = 9,
    Crop = 16,
    Rotate = 17,
    Flip = 18,
    Cutout = 19,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub iteration: u64,
    pub batch: u64,
    pub sample: u64,
    pub op: u64,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey {
            seed,
            ..Default::default()
        }
    }

    pub fn iteration(self, iteration: u64) -> Self {
        RngKey { iteration, ..self }
    }

    pub fn batch(self, batch: u64) -> Self {
        RngKey { batch, ..self }
    }

    pub fn sample(self, sample: u64) -> Self {
        RngKey { sample, ..self }
    }

    pub fn op(self, op: u64) -> Self {
        RngKey { op, ..self }
    }

    pub fn purpose(self, purpose: Purpose) -> Self {
        self.op(purpose as u64)
    }

    pub fn stream(self) -> RngStream {
        RngStream::new(self)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 generator seeded by hashing every key coordinate.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: RngKey,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: RngKey) -> Self {
        let mut state = 0x243F_6A88_85A3_08D3;
        for part in [key.seed, key.iteration, key.batch, key.sample, key.op] {
            state ^= part;
            state = splitmix64(&mut state);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream {
            key,
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn key(&self) -> RngKey {
        self.key
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
