//! splitmix64 stream and the Fisher–Yates shuffle built on it.
//!
//! The exact sequence is part of the result format: a given seed must
//! produce the same permutation in every implementation of the harness.
//!
//! * state advances by `0x9e3779b97f4a7c15`, output is the standard
//!   splitmix64 finalizer of the new state;
//! * `below(n)` draws `x` until `x < (u64::MAX / n) * n` and returns `x % n`;
//! * shuffling walks `i = len-1 .. 1` and swaps `i` with `below(i + 1)`.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..bound` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = (u64::MAX / bound) * bound;
        loop {
            let x = self.next();
            if x < zone {
                return x % bound;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// The first `count` outputs of a splitmix64 stream seeded with `master`.
pub fn derive_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = SplitMix64::new(master);
    (0..count).map(|_| rng.next()).collect()
}
