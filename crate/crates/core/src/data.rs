//! Datasets: synthetic sequence tasks and plain-text parallel corpora.
//!
//! Token ids 0-3 are reserved (pad, bos, eos, unk); content ids start at 4.
//! Corpus pairs store content tokens only; [`make_batch`] adds BOS/EOS and
//! pads to the batch's maximum lengths.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Number of reserved ids (pad/bos/eos/unk).
pub const RESERVED: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("source has {src} lines but target has {tgt}")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

/// Token ↔ id mapping with the four reserved ids fixed at 0-3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Vocabulary {
        let mut v = Vocabulary { tokens: Vec::new(), by_token: HashMap::new() };
        for t in ["<pad>", "<bos>", "<eos>", "<unk>"] {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.by_token.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.by_token.insert(token.to_string(), id);
        id
    }

    /// Builds a vocabulary from whitespace-tokenized lines, keeping tokens
    /// that occur at least `min_freq` times, in first-appearance order.
    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for line in lines {
            for tok in line.split_whitespace() {
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut v = Vocabulary::new();
        for tok in order {
            if counts[tok] >= min_freq {
                v.push(tok);
            }
        }
        v
    }

    /// Synthetic vocabulary of `size` total ids (reserved + placeholders).
    pub fn synthetic(size: usize) -> Vocabulary {
        let mut v = Vocabulary::new();
        for id in RESERVED..size {
            v.push(&format!("tok{id}"));
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens always present
    }

    /// Id of a token, or the unk id when absent.
    pub fn id_of(&self, token: &str) -> usize {
        self.by_token.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Whitespace tokenization to ids (OOV → unk).
    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id_of(t)).collect()
    }

    /// Space-joined tokens; the inverse of [`encode_line`] for in-vocab text.
    pub fn decode_line(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token_of(i)).collect::<Vec<_>>().join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

/// Aligned source/target id sequences (content tokens only) plus their
/// vocabulary.
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub vocab: Vocabulary,
    pub max_len: usize,
    /// Number of sequences shortened by the truncation policy.
    pub truncated: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    LookupTranslate,
}

impl std::str::FromStr for SyntheticTask {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "lookup-translate" => Ok(SyntheticTask::LookupTranslate),
            other => Err(DataError::Invalid(format!(
                "unknown task {other:?} (expected copy | reverse | lookup-translate)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::LookupTranslate => "lookup-translate",
        })
    }
}

/// Deterministic synthetic corpus. Sources are uniform over content ids;
/// the target is the source (copy), the reversed source (reverse), or a
/// tokenwise application of a fixed seeded permutation of the content ids
/// (lookup-translate).
pub fn make_synthetic(
    task: SyntheticTask,
    vocab_size: usize,
    len: usize,
    count: usize,
    seed: u64,
) -> Result<ParallelCorpus, DataError> {
    if vocab_size < 5 {
        return Err(DataError::Invalid(format!(
            "vocab size {vocab_size} < 5 (4 reserved ids + content)"
        )));
    }
    if len < 1 {
        return Err(DataError::Invalid("sequence length must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm: Vec<usize> = {
        let mut ids: Vec<usize> = (RESERVED..vocab_size).collect();
        ids.shuffle(&mut rng);
        ids
    };
    let apply = |id: usize| perm[id - RESERVED];

    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(RESERVED..vocab_size)).collect();
        let tgt = match task {
            SyntheticTask::Copy => src.clone(),
            SyntheticTask::Reverse => src.iter().rev().copied().collect(),
            SyntheticTask::LookupTranslate => src.iter().map(|&t| apply(t)).collect(),
        };
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus { pairs, vocab: Vocabulary::synthetic(vocab_size), max_len: len, truncated: 0 })
}

/// Loads aligned plain-text files (one sentence per line, whitespace
/// tokens). The vocabulary is built from both sides with a minimum
/// frequency cutoff; OOV tokens map to unk; lines longer than `max_len`
/// are truncated and counted.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    min_freq: usize,
    max_len: usize,
) -> Result<ParallelCorpus, DataError> {
    let src_text = std::fs::read_to_string(src_path)?;
    let tgt_text = std::fs::read_to_string(tgt_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError::LineCountMismatch { src: src_lines.len(), tgt: tgt_lines.len() });
    }
    if src_lines.is_empty() {
        return Err(DataError::Invalid("corpus files are empty".into()));
    }
    let vocab = Vocabulary::from_lines(src_lines.iter().chain(&tgt_lines).copied(), min_freq);
    let mut truncated = 0;
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let mut src_ids = vocab.encode_line(s);
        let mut tgt_ids = vocab.encode_line(t);
        if src_ids.len() > max_len {
            src_ids.truncate(max_len);
            truncated += 1;
        }
        if tgt_ids.len() > max_len {
            tgt_ids.truncate(max_len);
            truncated += 1;
        }
        pairs.push((src_ids, tgt_ids));
    }
    Ok(ParallelCorpus { pairs, vocab, max_len, truncated })
}

/// A padded teacher-forcing batch built from content-token pairs.
pub struct Batch {
    /// `[pairs x src_len]`, padded with [`PAD`].
    pub src: Vec<Vec<usize>>,
    /// `[pairs x (tgt_len + 1)]`: BOS + content, padded.
    pub tgt_in: Vec<Vec<usize>>,
    /// Flattened `[pairs · (tgt_len + 1)]`: content + EOS, padded — row-wise
    /// aligned with the flattened decoder output.
    pub tgt_out_flat: Vec<usize>,
    pub pairs: usize,
}

/// Pads every source to the batch's max source length and every target to
/// max target length + 1 (for the BOS shift / EOS append).
pub fn make_batch(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
    assert!(!pairs.is_empty(), "empty batch");
    let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
    let tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap() + 1;
    let mut src = Vec::with_capacity(pairs.len());
    let mut tgt_in = Vec::with_capacity(pairs.len());
    let mut tgt_out_flat = Vec::with_capacity(pairs.len() * tgt_len);
    for (s, t) in pairs {
        let mut row = s.clone();
        row.resize(src_len, PAD);
        src.push(row);

        let mut tin = Vec::with_capacity(tgt_len);
        tin.push(BOS);
        tin.extend_from_slice(t);
        tin.resize(tgt_len, PAD);
        tgt_in.push(tin);

        let mut tout = t.clone();
        tout.push(EOS);
        tout.resize(tgt_len, PAD);
        tgt_out_flat.extend_from_slice(&tout);
    }
    Batch { src, tgt_in, tgt_out_flat, pairs: pairs.len() }
}
