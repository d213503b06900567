//! Deterministic RNG streams.
//!
//! Every stochastic choice in the crate flows through a seeded ChaCha8
//! stream so runs are reproducible across platforms and dtypes. Per-token
//! streams are derived by mixing the experiment seed with the token id,
//! which keeps mask construction independent of vocabulary order: adding
//! or removing tokens never changes another token's draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer over a seed/stream-id pair.
pub fn mix64(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root stream for a 64-bit seed.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for one token under one experiment seed.
pub fn token_stream(seed: u64, token_id: u32) -> ChaCha8Rng {
    chacha(mix64(seed, token_id as u64))
}

/// Draw an index uniformly from `0..n` (modulo draw; n is tiny here).
pub fn draw_index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "draw_index from empty range");
    (rng.next_u64() % n as u64) as usize
}

/// Sample `v` distinct values from `0..n` by partial Fisher-Yates.
///
/// The first element of the result always equals `draw_index(rng, n)` on a
/// fresh stream, a property the hash router relies on.
pub fn sample_distinct(rng: &mut impl RngCore, v: usize, n: usize) -> Vec<u32> {
    assert!(v >= 1 && v <= n, "need 1 <= v <= n, got v={v} n={n}");
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..v {
        let j = i + draw_index(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(v);
    pool
}

/// Fisher-Yates shuffle of a slice, used for batch-order permutations.
pub fn shuffle<T>(rng: &mut impl RngCore, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = draw_index(rng, i + 1);
        xs.swap(i, j);
    }
}
