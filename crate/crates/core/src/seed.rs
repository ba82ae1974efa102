//! Seed derivation. Every random stream in the toolkit is seeded from the
//! top-level seed plus a purpose tag and an index, so independent consumers
//! (epoch shuffles, dropout masks, sweep cells) never share a stream.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(seed ^ fnv1a(purpose) ^ splitmix64(index))`.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ h ^ splitmix64(index))
}
