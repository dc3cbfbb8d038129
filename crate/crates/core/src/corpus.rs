//! Byte-level tokenization and seeded calibration sampling.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpdError};

pub const BYTE_VOCAB: usize = 256;

/// Fixed-length token windows used for sensitivity scans and distillation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub seed: u64,
    pub source: String,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples, each truncated to at most `max_tokens`.
    pub fn subset(&self, n: usize, max_tokens: usize) -> CalibrationSet {
        CalibrationSet {
            samples: self
                .samples
                .iter()
                .take(n)
                .map(|s| s[..s.len().min(max_tokens)].to_vec())
                .collect(),
            seq_len: self.seq_len.min(max_tokens),
            seed: self.seed,
            source: format!("{} (first {n}, <= {max_tokens} tokens)", self.source),
        }
    }

    /// Writes `n_samples: u32`, `seq_len: u32`, `seed: u64`, then every token
    /// as a little-endian `u32`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        w.write_all(&(self.seq_len as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in &self.samples {
            if s.len() != self.seq_len {
                return Err(SpdError::Data("sample length differs from seq_len".into()));
            }
            for t in s {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, source: &str) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 16 {
            return Err(SpdError::Format("calibration file shorter than its header".into()));
        }
        let n = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let seq_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let body = &buf[16..];
        if body.len() != n * seq_len * 4 {
            return Err(SpdError::Format(format!(
                "expected {} token bytes, found {}",
                n * seq_len * 4,
                body.len()
            )));
        }
        let tokens: Vec<u32> =
            body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let samples = if seq_len == 0 {
            vec![Vec::new(); n]
        } else {
            tokens.chunks(seq_len).map(<[u32]>::to_vec).collect()
        };
        Ok(Self { samples, seq_len, seed, source: source.to_string() })
    }
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| SpdError::Data(format!("token {t} is not a byte"))))
        .collect()
}

pub fn load_and_tokenize(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    Ok(tokenize(&crate::checkpoint::read_file(path)?))
}

/// Draws `n_samples` windows of `seq_len` tokens at distinct offsets when the
/// stream has enough of them; otherwise every offset is used once and the
/// remainder is drawn with replacement.
pub fn sample_calibration(
    stream: &[u32],
    n_samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if seq_len == 0 || stream.len() < seq_len {
        return Err(SpdError::Data(format!(
            "stream of {} tokens cannot provide windows of {seq_len}",
            stream.len()
        )));
    }
    let offsets_available = stream.len() - seq_len + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets: Vec<usize> =
        sample(&mut rng, offsets_available, n_samples.min(offsets_available)).into_vec();
    while offsets.len() < n_samples {
        offsets.push(rng.random_range(0..offsets_available));
    }
    Ok(CalibrationSet {
        samples: offsets.iter().map(|&o| stream[o..o + seq_len].to_vec()).collect(),
        seq_len,
        seed,
        source: format!("{} tokens", stream.len()),
    })
}

const SUBJECTS: &[&str] = &[
    "the device", "each shard", "a small model", "the ring", "every block", "the mesh",
    "one worker", "the cache", "a partial sum", "the residual stream",
];
const VERBS: &[&str] = &[
    "sends", "reduces", "reads", "holds", "drops", "waits for", "computes", "merges",
    "scatters", "keeps",
];
const OBJECTS: &[&str] = &[
    "its local heads", "the attention output", "a column slice", "the next token",
    "the hidden state", "two sync points", "the mlp partition", "a row of weights",
    "the final logits", "one more message",
];
const TAILS: &[&str] = &[".", " quickly.", " before the barrier.", " on time.", " again.", "!"];

/// Deterministic English-like text from a tiny grammar, for runs that have
/// no corpus file at hand.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
        let v = VERBS[rng.random_range(0..VERBS.len())];
        let o = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let t = TAILS[rng.random_range(0..TAILS.len())];
        let mut first = s.to_string();
        if rng.random_bool(0.5) {
            first[..1].make_ascii_uppercase();
        }
        out.push_str(&format!("{first} {v} {o}{t}"));
        out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
