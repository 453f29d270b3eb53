//! Word-level corpora: vocabulary, contiguous splits, fixed-length batches and
//! the within-batch target shuffle used by the leakage test.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KetError, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Bijection between token strings and ids `0..V`. The unknown token always
/// takes the last id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
}

impl Vocab {
    /// Whitespace tokenization; keeps the `max_size - 1` most frequent tokens
    /// (ties go to the earlier first occurrence) plus `<unk>`.
    pub fn build(text: &str, max_size: usize) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        Self::from_tokens(&words, max_size)
    }

    pub fn from_tokens(words: &[&str], max_size: usize) -> Result<Self> {
        if words.is_empty() {
            return Err(KetError::EmptyText);
        }
        if max_size == 0 {
            return Err(KetError::InvalidConfig("vocabulary size must be at least 1".into()));
        }
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, w) in words.iter().enumerate() {
            if *w == UNK_TOKEN {
                continue;
            }
            stats.entry(w).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            stats.into_iter().map(|(w, (c, first))| (w, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 1);
        let mut tokens: Vec<String> = ranked.into_iter().map(|(w, _, _)| w.to_string()).collect();
        tokens.push(UNK_TOKEN.to_string());
        Ok(Self::from_list(tokens))
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let unk = tokens.iter().position(|t| t == UNK_TOKEN).unwrap_or(tokens.len() - 1);
        Self { tokens, index, unk }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK_TOKEN)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("writing to a String cannot fail");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(KetError::EmptyText);
        }
        if !tokens.iter().any(|t| t == UNK_TOKEN) {
            return Err(KetError::InvalidConfig(format!("vocab dump lacks {UNK_TOKEN}")));
        }
        Ok(Self::from_list(tokens))
    }
}

/// Fractions of the token stream assigned to train / valid / test, in that
/// order and contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.9, valid: 0.05, test: 0.05 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(KetError::InvalidConfig("split fractions must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(KetError::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Half-open index ranges of the three splits over a stream of `n` tokens.
    pub fn ranges(&self, n: usize) -> Result<[std::ops::Range<usize>; 3]> {
        self.validate()?;
        let n_train = (n as f64 * self.train).floor() as usize;
        let n_valid = (n as f64 * self.valid).floor() as usize;
        if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
            return Err(KetError::StreamTooShort { needed: 3, got: n });
        }
        Ok([0..n_train, n_train..n_train + n_valid, n_train + n_valid..n])
    }
}

/// A tokenized corpus split into train / valid / test streams.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Corpus {
    /// The vocabulary is built from the training split only.
    pub fn from_text(name: &str, text: &str, max_vocab: usize, split: SplitSpec) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(KetError::EmptyText);
        }
        let [tr, va, te] = split.ranges(words.len())?;
        let vocab = Vocab::from_tokens(&words[tr.clone()], max_vocab)?;
        let enc = |r: std::ops::Range<usize>| words[r].iter().map(|w| vocab.id(w)).collect();
        Ok(Self { name: name.to_string(), train: enc(tr), valid: enc(va), test: enc(te), vocab })
    }

    pub fn from_file(path: &Path, max_vocab: usize, split: SplitSpec) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
        Self::from_text(&name, &text, max_vocab, split)
    }

    /// The bundled synthetic corpus, regenerated deterministically.
    pub fn synthetic() -> Result<Self> {
        let text = synthetic_text(SYNTHETIC_SEED, SYNTHETIC_TOKENS);
        Self::from_text("synthetic", &text, 4096, SplitSpec::default())
    }

    pub fn stream(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// `B x S` inputs with next-token targets, both row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn num_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Starting offsets of the non-overlapping windows of length `seq_len + 1`
/// (sharing one token between neighbours) that fit in the stream.
fn window_starts(stream_len: usize, seq_len: usize) -> Result<Vec<usize>> {
    if seq_len == 0 {
        return Err(KetError::InvalidConfig("context length must be positive".into()));
    }
    if stream_len < seq_len + 1 {
        return Err(KetError::StreamTooShort { needed: seq_len + 1, got: stream_len });
    }
    Ok((0..(stream_len - 1) / seq_len).map(|w| w * seq_len).collect())
}

fn assemble(stream: &[usize], starts: &[usize], seq_len: usize, batch_size: usize) -> Vec<Batch> {
    starts
        .chunks(batch_size)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * seq_len);
            let mut targets = Vec::with_capacity(chunk.len() * seq_len);
            for &s in chunk {
                inputs.extend_from_slice(&stream[s..s + seq_len]);
                targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
            }
            Batch { batch_size: chunk.len(), seq_len, inputs, targets }
        })
        .collect()
}

/// Contiguous windows in seed-shuffled order, grouped into batches of at most
/// `batch_size` rows (the final batch may be smaller).
pub fn make_batches(stream: &[usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(KetError::InvalidConfig("batch size must be positive".into()));
    }
    let mut starts = window_starts(stream.len(), seq_len)?;
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(assemble(stream, &starts, seq_len, batch_size))
}

/// Same windows as [`make_batches`] but in stream order, for evaluation.
pub fn sequential_batches(stream: &[usize], seq_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(KetError::InvalidConfig("batch size must be positive".into()));
    }
    let starts = window_starts(stream.len(), seq_len)?;
    Ok(assemble(stream, &starts, seq_len, batch_size))
}

/// Uniform permutation of all targets in the batch; inputs are untouched.
pub fn shuffle_targets(batch: &Batch, seed: u64) -> Batch {
    let mut out = batch.clone();
    out.targets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

pub const SYNTHETIC_SEED: u64 = 20_240_917;
pub const SYNTHETIC_TOKENS: usize = 100_000;
const SYNTHETIC_WORDS: usize = 96;
const SYNTHETIC_BRANCHING: usize = 16;
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "du", "ha", "ze"];

/// Pseudo-word sentences from a sparse first-order chain: every word has its
/// own 16 successors with skewed weights, and sentences end in `.` after
/// 5 to 12 words.
pub fn synthetic_text(seed: u64, n_tokens: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..SYNTHETIC_WORDS)
        .map(|i| format!("{}{}", SYLLABLES[i % 12], SYLLABLES[(i / 12 + 3) % 12]))
        .collect();
    let weights: Vec<f64> = (0..SYNTHETIC_BRANCHING).map(|r| 1.0 / (r as f64 + 3.0)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let successors: Vec<Vec<usize>> = (0..SYNTHETIC_WORDS)
        .map(|_| index::sample(&mut rng, SYNTHETIC_WORDS, SYNTHETIC_BRANCHING).into_vec())
        .collect();

    let mut out = String::with_capacity(n_tokens * 6);
    let mut emitted = 0;
    let mut current = rng.random_range(0..SYNTHETIC_WORDS);
    while emitted < n_tokens {
        let len = rng.random_range(5..=12);
        for _ in 0..len {
            if emitted == n_tokens {
                break;
            }
            out.push_str(&words[current]);
            out.push(' ');
            emitted += 1;
            current = successors[current][pick.sample(&mut rng)];
        }
        if emitted < n_tokens {
            out.push_str(".\n");
            emitted += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_orders_by_frequency_then_first_occurrence() {
        let v = Vocab::build("a b a", 10).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("a"), 0);
        assert_eq!(v.id("b"), 1);
        assert_eq!(v.unk(), 2);
        assert_eq!(v.id("zzz"), v.unk());

        let tie = Vocab::build("y x x y z", 3).unwrap();
        assert_eq!(tie.token(0), Some("y"));
        assert_eq!(tie.token(1), Some("x"));
        assert_eq!(tie.id("z"), tie.unk());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build("the cat  sat\n on the mat", 100).unwrap();
        let ids = v.encode("the  cat sat on\tthe mat");
        assert_eq!(v.decode(&ids), "the cat sat on the mat");
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(Vocab::build("  \n ", 5), Err(KetError::EmptyText)));
    }

    #[test]
    fn first_window_is_shift_by_one() {
        let stream: Vec<usize> = (0..10).collect();
        let b = sequential_batches(&stream, 4, 8).unwrap();
        assert_eq!(b[0].row(0), &[0, 1, 2, 3]);
        assert_eq!(&b[0].targets[..4], &[1, 2, 3, 4]);
        assert_eq!(b[0].batch_size, 2);
    }

    #[test]
    fn short_stream_rejected() {
        assert!(matches!(make_batches(&[1, 2, 3], 3, 2, 0), Err(KetError::StreamTooShort { .. })));
    }

    #[test]
    fn split_ranges_are_contiguous() {
        let [a, b, c] = SplitSpec::default().ranges(1000).unwrap();
        assert_eq!((a.end, b.start, b.end, c.start, c.end), (900, 900, 950, 950, 1000));
        assert!(SplitSpec { train: 0.5, valid: 0.5, test: 0.1 }.validate().is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        let a = synthetic_text(3, 500);
        assert_eq!(a, synthetic_text(3, 500));
        assert_eq!(a.split_whitespace().count(), 500);
        assert_ne!(a, synthetic_text(4, 500));
    }
}
