//! Deterministic random-stream derivation.
//!
//! Every stochastic component draws from a ChaCha8 stream derived by hashing
//! a global seed with a purpose label (and, for per-sample streams, the
//! sample id and epoch). State is never carried between steps: the stream
//! for (seed, step) can be reconstructed from scratch, which is what makes
//! checkpoint-resume and worker-count independence exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a over the label bytes, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Derive the sub-seed for a labeled stream.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ hash_label(label))
}

/// Named independent stream from a global seed.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}

/// Stream for one sample in one epoch, independent of visit order.
pub fn sample_stream(seed: u64, label: &str, sample: u64, epoch: u64) -> ChaCha8Rng {
    let s = stream_seed(seed, label);
    ChaCha8Rng::seed_from_u64(mix(s ^ mix(sample) ^ mix(epoch.wrapping_mul(0xd134_2543_de82_ef95))))
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
