//! Seed derivation. Every stage of a run takes its seed from the single
//! global seed plus the stage's name, so stages can be re-run in isolation.

/// FNV-1a over the bytes of `label`.
pub fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One round of the SplitMix64 finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `splitmix64(seed + fnv1a(stage))`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed.wrapping_add(fnv1a(stage)))
}
