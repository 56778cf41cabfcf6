//! Seeded, stream-labeled pseudo-random numbers.
//!
//! Every stochastic decision in the simulator draws from an [`Rng`] derived
//! from a root seed and a textual stream label (for example
//! `"protocol/round/7"`). The same `(root seed, label)` pair always yields the
//! identical sequence, so whole experiments replay bit-for-bit, and distinct
//! labels give independent streams that do not shift when an unrelated part
//! of the pipeline changes how many values it consumes.

use std::f64::consts::TAU;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn avalanche(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splitmix-style 64-bit generator with named stream derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    root_seed: u64,
    label: String,
    state: u64,
}

impl Rng {
    /// Derive the stream identified by `label` from `root_seed`.
    ///
    /// Pure function of its inputs: the initial state is an FNV-1a hash of
    /// the seed bytes followed by the label bytes, passed through one
    /// avalanche round.
    pub fn derive(root_seed: u64, label: &str) -> Rng {
        let mut h = FNV_OFFSET;
        for b in root_seed.to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        for &b in label.as_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        Rng {
            root_seed,
            label: label.to_owned(),
            state: avalanche(h),
        }
    }

    /// Derive a sub-stream `"{label}/{suffix}"` from the same root seed.
    ///
    /// Depends only on the root seed and the combined label, not on how many
    /// values this stream has already produced.
    pub fn child(&self, suffix: &str) -> Rng {
        Rng::derive(self.root_seed, &format!("{}/{}", self.label, suffix))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        avalanche(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (two uniforms per value, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        // Widening multiply avoids modulo bias.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Categorical draw over `probs` (assumed to sum to ~1).
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
