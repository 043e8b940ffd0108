//! Seeded random streams. Every consumer gets its own generator derived from
//! the run seed and a fixed label, so adding a country or a chain never
//! shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha12Rng;

pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"tfrproj-stream\0");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
