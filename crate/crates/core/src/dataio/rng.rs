//! Seeded randomness. Every stochastic operation takes an explicit [`Rng`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The engine's one generator type: ChaCha8, reproducible across platforms.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for a tuple of indices (level, epoch, image, ...), so
/// results never depend on the order work is scheduled in.
pub fn derive(seed: u64, stream: &[u64]) -> Rng {
    let mut h = splitmix(seed ^ 0x6d72_666c_6f77_0001);
    for &s in stream {
        h = splitmix(h ^ splitmix(s.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    Rng::seed_from_u64(h)
}

/// A 64-bit seed for the stream `stream` of `seed`, for APIs that take seeds.
pub fn sub_seed(seed: u64, stream: &[u64]) -> u64 {
    use rand::RngCore;
    derive(seed, stream).next_u64()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
