//! Deterministic stand-in for a text encoder plus the seed-mixing helpers
//! shared by every random stream in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::plan::tokenize;
use crate::tensor::Matrix;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of keys.
pub fn stream_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, keys))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const TEXT_STREAM: u64 = 0x7e47;

/// Unit-norm embedding of a single token.
pub fn embed_token(token: &str, seed: u64, width: usize) -> Vec<f32> {
    let mut rng = stream_rng(seed, &[TEXT_STREAM, fnv1a(token.as_bytes())]);
    let raw: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// Whitespace-tokenizes `text` and embeds every token: `L × width`.
pub fn encode_prompt(text: &str, seed: u64, width: usize) -> Result<Matrix> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Invalid("cannot encode an empty prompt".into()));
    }
    if width == 0 {
        return Err(Error::Invalid("embedding width must be positive".into()));
    }
    let rows: Vec<Vec<f32>> = tokens.iter().map(|t| embed_token(t, seed, width)).collect();
    Matrix::from_rows(&rows)
}
