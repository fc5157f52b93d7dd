//! Deterministic seed derivation and the crate's random generator.
//!
//! All randomness comes from [`ChaCha8Rng`], a counter-based 64-bit-seeded
//! stream cipher generator. Sub-seeds are the first eight bytes of
//! SHA-256 over a tagged, length-prefixed encoding of their inputs, so a
//! stage's stream does not depend on which other stages ran or in which
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// One component of a seed derivation path.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    U64(u64),
    F64(f64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Str(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::U64(v)
    }
}

impl From<f64> for SeedPart<'_> {
    fn from(v: f64) -> Self {
        SeedPart::F64(v)
    }
}

/// Derives a child seed from `base` and a path of labelled parts.
pub fn derive_seed(base: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"stratgeo-seed-v1");
    h.update(base.to_le_bytes());
    for part in parts {
        match part {
            SeedPart::Str(s) => {
                h.update(*b"s");
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            SeedPart::U64(v) => {
                h.update(*b"u");
                h.update(v.to_le_bytes());
            }
            SeedPart::F64(v) => {
                h.update(*b"f");
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
