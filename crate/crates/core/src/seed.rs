//! Seed derivation and content digests.
//!
//! Every random choice in a batch is derived from the query seed through the
//! functions here, so a batch is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of job `job_index` within a batch seeded by `query_seed`.
///
/// `job_seed = splitmix64(query_seed ^ splitmix64(job_index))`. The formula is
/// part of the reproducibility contract and must not change between versions.
pub fn job_seed(query_seed: u64, job_index: u64) -> u64 {
    splitmix64(query_seed ^ splitmix64(job_index))
}

/// Sampling seed for one attempt of one stage of a job.
///
/// Attempts are offset by their 0-based index so a retry resamples instead of
/// replaying the cached response of the failed attempt.
pub fn stage_seed(job_seed: u64, stage_salt: u64, attempt: u32) -> u64 {
    splitmix64(job_seed ^ stage_salt.wrapping_mul(GOLDEN_GAMMA)).wrapping_add(u64::from(attempt))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex characters of the SHA-256 of `bytes`.
pub fn short_digest(bytes: &[u8]) -> String {
    let mut s = sha256_hex(bytes);
    s.truncate(16);
    s
}

/// Record identifier: short digest over (query seed, job index, pipeline id).
pub fn record_id(query_seed: u64, job_index: u64, pipeline_id: &str) -> String {
    let mut buf = Vec::with_capacity(16 + pipeline_id.len());
    buf.extend_from_slice(&query_seed.to_le_bytes());
    buf.extend_from_slice(&job_index.to_le_bytes());
    buf.extend_from_slice(pipeline_id.as_bytes());
    short_digest(&buf)
}
