//! Deterministic seed derivation for independent RNG streams.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Decorrelated child seed for (`stream`, `index`) under a master seed.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ stream.wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}
