//! Deterministic stream derivation for seeded runs.
//!
//! Every random draw in the crate flows from one base seed through
//! [`substream`], so serial and parallel executions of the same configuration
//! agree bit for bit regardless of scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; platform-stable unlike `DefaultHasher`.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG from a base seed and a list of stream tags
/// (replication index, group index, purpose tag, ...).
pub fn substream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(base ^ 0x6c07_9768_25d1_4e2b);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stream tags used by the Monte Carlo harness and predictors.
pub mod tag {
    pub const NETWORK: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const SHOCKS: u64 = 3;
    pub const GROUP_EFFECTS: u64 = 4;
    pub const PREDICTOR: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let mut a = substream(42, &[1, 7]);
        let mut b = substream(42, &[1, 7]);
        let mut c = substream(42, &[7, 1]);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        let xc: u64 = c.random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc, "tag order must matter");
    }
}
