//! Deterministic fan-out of one master seed into per-subsystem seeds.
//!
//! `derive_seed(master, stream)` is the first eight bytes (little endian) of
//! `SHA-256("seed-split\0" || master as u64 LE || stream)`.

use sha2::{Digest, Sha256};

pub const SPLIT_RULE: &str = "u64_le(sha256(\"seed-split\\0\" || u64_le(master) || stream)[0..8])";

pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"seed-split\0");
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
