//! Seed derivation.
//!
//! All randomness in the CLI funnels through one master seed. Component
//! streams are derived as `splitmix64(master ^ fnv1a(tag))`, so adding a
//! new consumer never perturbs existing streams.

/// FNV-1a over the tag bytes.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic child seed for a named component.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a(tag))
}

/// Child seed for a numbered item inside a component (e.g. one pair).
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_add(1)))
}
