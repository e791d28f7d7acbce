//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha8 stream from `(seed, purpose)`, so
//! adding a new consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent stream for `purpose` under `seed`.
pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digest = Sha256::digest(purpose.as_bytes());
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    rng.set_stream(u64::from_le_bytes(id));
    rng
}
