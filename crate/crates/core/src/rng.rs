//! Seedable, splittable random streams.
//!
//! Every stream is a xoshiro256++ generator. Child streams are derived from
//! the parent's *seed* (never its state), so `child(id)` is the same no
//! matter how many draws the parent has already made. This is what lets the
//! harness hand disjoint deterministic substreams to parallel workers.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of child `stream_id` under `parent`.
pub fn derive_seed(parent: u64, stream_id: u64) -> u64 {
    mix64(mix64(parent) ^ mix64(stream_id.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, stream_id: u64) -> Stream {
        Stream::new(derive_seed(self.seed, stream_id))
    }

    /// Child addressed by a path of ids, e.g. `[trial, entity]`.
    pub fn descend(&self, path: &[u64]) -> Stream {
        Stream::new(path.iter().fold(self.seed, |s, &id| derive_seed(s, id)))
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
