//! Counter-based seeding: every random stream is a pure function of a
//! global seed and a tuple of indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `seed` together with an index tuple.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Stable key derived from an image's bit pattern.
pub fn content_key(data: &[f32]) -> u64 {
    data.iter().fold(splitmix64(data.len() as u64), |h, v| {
        splitmix64(h ^ v.to_bits() as u64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn content_key_sees_every_bit() {
        assert_ne!(content_key(&[0.0, 1.0]), content_key(&[1.0, 0.0]));
        assert_ne!(content_key(&[0.0]), content_key(&[-0.0]));
    }
}
