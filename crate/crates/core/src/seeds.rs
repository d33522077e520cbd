//! Named seed streams. Every random draw in the lab comes from a generator
//! seeded by [`derive_seed`], so results depend only on the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

/// Seed for item `idx` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(idx.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: &str, idx: u64) -> LabRng {
    rng(derive_seed(master, stream, idx))
}
