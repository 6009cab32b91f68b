//! Seeded, counter-addressable random streams.
//!
//! Every stream is a ChaCha8 keystream. The key comes from the 64-bit seed
//! (expanded by `SeedableRng::seed_from_u64`), the ChaCha stream selector is
//! the 64-bit stream id, and the counter is the position in the keystream
//! measured in 32-bit words. `(seed, stream_id, counter)` therefore pins the
//! next draw exactly, independent of platform.
//!
//! Counter accounting: [`RngStream::next_f64`] and every uniform draw consume
//! one `u64`, i.e. advance the counter by 2. Gaussian draws go through
//! `rand_distr` and consume a variable number of words.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Words consumed by one uniform draw.
pub const WORDS_PER_UNIFORM: u64 = 2;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finaliser, used to derive child stream ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> RngStream {
        RngStream::at(seed, stream_id, 0)
    }

    /// Positions a stream at an arbitrary counter.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(counter as u128);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// An independent stream keyed by this stream's id and `index`. The
    /// parent's counter is not consulted or advanced.
    pub fn derive(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream_id ^ mix64(index)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`. A collapsed range returns `lo` but still
    /// consumes a draw so that counters stay aligned across policies.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.next_f64();
        if hi <= lo {
            return lo;
        }
        let v = lo + (hi - lo) * u;
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// `n` FP32 values in `[lo, hi)`; advances the counter by `2n`.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32, n: usize) -> Result<Vec<f32>> {
        if !(lo < hi) {
            return Err(Error::Range(format!("uniform range [{lo}, {hi}) is empty")));
        }
        Ok((0..n)
            .map(|_| {
                let v = (lo as f64 + (hi as f64 - lo as f64) * self.next_f64()) as f32;
                if v >= hi {
                    hi.next_down()
                } else {
                    v.max(lo)
                }
            })
            .collect())
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
