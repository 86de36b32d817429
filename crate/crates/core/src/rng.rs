//! Seed derivation. Every random stream in the pipeline is a ChaCha stream
//! keyed by a hash of its role, so any cell of an experiment can be replayed
//! on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// One component of a derivation path.
#[derive(Clone, Copy, Debug)]
pub enum Part<'a> {
    Int(u64),
    Str(&'a str),
    Float(f64),
}

impl From<u64> for Part<'_> {
    fn from(v: u64) -> Self {
        Part::Int(v)
    }
}

impl From<u32> for Part<'_> {
    fn from(v: u32) -> Self {
        Part::Int(v as u64)
    }
}

impl From<usize> for Part<'_> {
    fn from(v: usize) -> Self {
        Part::Int(v as u64)
    }
}

impl<'a> From<&'a str> for Part<'a> {
    fn from(v: &'a str) -> Self {
        Part::Str(v)
    }
}

impl From<f64> for Part<'_> {
    fn from(v: f64) -> Self {
        Part::Float(v)
    }
}

/// Hashes `base` together with a path of labelled parts into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[Part<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"fpb-seed");
    hasher.update(base.to_le_bytes());
    for part in parts {
        match part {
            Part::Int(v) => {
                hasher.update([0u8]);
                hasher.update(v.to_le_bytes());
            }
            Part::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Part::Float(f) => {
                hasher.update([2u8]);
                hasher.update(f.to_bits().to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(base: u64, parts: &[Part<'_>]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}
