//! Deterministic sub-seed derivation, so parallel work can draw from
//! independent streams that do not depend on scheduling.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master` with a key path (e.g. tree index, or region/period/type).
pub fn derive_seed(master: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(master), |acc, k| splitmix64(acc ^ splitmix64(*k)))
}
