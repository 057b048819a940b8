//! Seedable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and selected
//! by a 64-bit stream id (ChaCha's native stream counter). ChaCha8 output
//! is fixed by its reference definition, so a given `(seed, stream_id)`
//! yields the same sequence on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RandomStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream keyed by this stream's seed and a stream id mixed from
    /// this stream's id and `tag`. Does not consume from `self`.
    pub fn derive(&self, tag: u64) -> RandomStream {
        RandomStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(tag)))
    }

    /// A new stream seeded from the next draw of this one.
    pub fn fork(&mut self) -> RandomStream {
        let seed = self.next_u64();
        RandomStream::new(seed, self.stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, spelled out so the permutation does not depend on
        // the rand crate's shuffle implementation.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream id composed from up to four 16-bit coordinates.
pub fn stream_key(parts: [u64; 4]) -> u64 {
    parts
        .iter()
        .fold(0u64, |acc, &p| (acc << 16) | (p & 0xFFFF))
}
