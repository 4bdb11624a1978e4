//! Seed derivation for independent random streams.

/// Fold `parts` into one seed with a splitmix64 finalizer per step, so each
/// `(seed, stream, epoch, batch, ...)` tuple gets its own generator.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x6A09_E667_F3BC_C908;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const GAN: u64 = 5;
    pub const TRANSMIT: u64 = 6;
}
