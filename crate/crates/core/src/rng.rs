//! Seed and stream discipline.
//!
//! All randomness in the crate flows from one user-supplied seed through
//! ChaCha8 generators. Distinct purposes get distinct stream ids so that
//! adding draws to one stage never perturbs another, and per-attempt
//! generation substreams make sample sets reproducible independent of
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator family name recorded in configs and checkpoints.
pub const RNG_KIND: &str = "chacha8";

pub const STREAM_INIT: u64 = 0x01;
pub const STREAM_TRAIN: u64 = 0x02;
pub const STREAM_SYNTH: u64 = 0x03;

/// High bit marks generation substreams; low bits encode (window, attempt).
const GEN_FLAG: u64 = 1 << 63;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent substream for one generation attempt of one window.
pub fn gen_stream(window_idx: usize, attempt: usize) -> u64 {
    debug_assert!(attempt < (1 << 20));
    GEN_FLAG | ((window_idx as u64) << 20) | attempt as u64
}

/// Substream for synthetic-scene agent trajectories.
pub fn synth_agent_stream(agent_idx: usize) -> u64 {
    STREAM_SYNTH | ((agent_idx as u64) << 8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent() {
        let mut a = rng_for(1, STREAM_INIT);
        let mut b = rng_for(1, STREAM_TRAIN);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn same_seed_same_stream_reproduces() {
        let mut a = rng_for(42, gen_stream(7, 3));
        let mut b = rng_for(42, gen_stream(7, 3));
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn gen_streams_do_not_collide_nearby() {
        let s1 = gen_stream(0, 1);
        let s2 = gen_stream(1, 0);
        assert_ne!(s1, s2);
    }
}
