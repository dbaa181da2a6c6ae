use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the seed and the labels, so that each (resource, purpose) pair
/// gets its own stream regardless of the order streams are created in.
fn mix(seed: u64, labels: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in seed.to_le_bytes() {
        feed(b);
    }
    for label in labels {
        for &b in *label {
            feed(b);
        }
        feed(0xff);
    }
    h
}

/// A random stream identified by the simulation seed, a resource and a purpose.
pub fn stream_for(seed: u64, resource: &str, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, &[resource.as_bytes(), purpose.as_bytes()]))
}

/// A single uniform draw in `[0, 1)` keyed by arbitrary labels.
pub fn unit_draw(seed: u64, labels: &[&str]) -> f64 {
    let bytes: Vec<&[u8]> = labels.iter().map(|l| l.as_bytes()).collect();
    ChaCha8Rng::seed_from_u64(mix(seed, &bytes)).gen::<f64>()
}
