use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a (seed, stream...) tuple. Streams let
/// independent pieces of work (trials, subjects) draw reproducibly in any
/// order.
pub fn rng_for(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        state = splitmix(state ^ splitmix(s.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    ChaCha8Rng::seed_from_u64(splitmix(state))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
