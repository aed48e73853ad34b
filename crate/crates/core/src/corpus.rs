//! Sequence selection for the representation analyses.
//!
//! Raw text is split into documents at blank lines and into words at
//! whitespace. A word ending in `.`, `!` or `?` closes a sentence; the mark
//! is split off and rewritten to the sentence-final word `.`. Candidate
//! sequences are word-aligned windows that end on such a mark:
//!
//! - **short**: exactly 15 tokens;
//! - **long**: 500 to 600 tokens inclusive (the shortest qualifying window
//!   ending at each boundary).
//!
//! Windows never overlap and never cross documents. Shuffled controls
//! permute the words before the final mark, keeping the mark last.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::months::SyntheticVocab;
use crate::trace::SequenceInput;

pub const SENTENCE_MARK: &str = ".";
pub const DEFAULT_COUNT: usize = 1000;
pub const MAX_SHUFFLE_ATTEMPTS: u64 = 16;

/// Word-sequence tokenizer.
pub trait Tokenizer {
    /// Recorded in manifests so token counts can be traced to their source.
    fn name(&self) -> String;
    fn encode_word(&self, word: &str) -> Result<Vec<u32>>;

    fn encode_words(&self, words: &[String]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for w in words {
            out.extend(self.encode_word(w)?);
        }
        Ok(out)
    }
}

/// One token per word.
///
/// With a fixed vocabulary unknown words are an error. The hashed variant
/// maps any word into `buckets` ids via FNV-1a, reserving id 0 for the
/// sentence mark, so arbitrary text can feed a model of that vocabulary size.
#[derive(Debug, Clone)]
pub enum WordTokenizer {
    Vocab(SyntheticVocab),
    Hashed { buckets: usize },
}

impl WordTokenizer {
    pub fn hashed(buckets: usize) -> Result<Self> {
        if buckets < 2 {
            return Err(Error::Corpus(format!("hashed tokenizer needs at least 2 ids, got {buckets}")));
        }
        Ok(WordTokenizer::Hashed { buckets })
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Tokenizer for WordTokenizer {
    fn name(&self) -> String {
        match self {
            WordTokenizer::Vocab(v) => format!("word-vocab-{}", v.len()),
            WordTokenizer::Hashed { buckets } => format!("word-fnv1a-{buckets}"),
        }
    }

    fn encode_word(&self, word: &str) -> Result<Vec<u32>> {
        match self {
            WordTokenizer::Vocab(v) => v
                .id(word)
                .map(|id| vec![id])
                .ok_or_else(|| Error::Corpus(format!("word `{word}` is not in the vocabulary"))),
            WordTokenizer::Hashed { buckets } => {
                if word == SENTENCE_MARK {
                    Ok(vec![0])
                } else {
                    Ok(vec![1 + (fnv1a(word) % (*buckets as u64 - 1)) as u32])
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthClass {
    Short,
    Long,
}

impl LengthClass {
    pub fn bounds(self) -> (usize, usize) {
        match self {
            LengthClass::Short => (15, 15),
            LengthClass::Long => (500, 600),
        }
    }

    pub fn admits(self, len: usize) -> bool {
        let (lo, hi) = self.bounds();
        (lo..=hi).contains(&len)
    }
}

impl fmt::Display for LengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthClass::Short => "short",
            LengthClass::Long => "long",
        })
    }
}

impl FromStr for LengthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(LengthClass::Short),
            "long" => Ok(LengthClass::Long),
            other => Err(Error::Invalid(format!("unknown length class `{other}` (expected short or long)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderClass {
    Ordered,
    Shuffled,
}

impl fmt::Display for OrderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderClass::Ordered => "ordered",
            OrderClass::Shuffled => "shuffled",
        })
    }
}

impl FromStr for OrderClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(OrderClass::Ordered),
            "shuffled" => Ok(OrderClass::Shuffled),
            other => Err(Error::Invalid(format!("unknown condition `{other}` (expected ordered or shuffled)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub length_class: LengthClass,
    pub order: OrderClass,
    pub words: Vec<String>,
    pub tokens: Vec<u32>,
    pub pilot_last: usize,
    pub pilot_fourth_from_end: usize,
}

impl SequenceRecord {
    fn build(id: String, length_class: LengthClass, order: OrderClass, words: Vec<String>, tokens: Vec<u32>) -> Result<Self> {
        let (pilot_last, pilot_fourth_from_end) = pilot_indices(tokens.len())?;
        Ok(SequenceRecord { id, length_class, order, words, tokens, pilot_last, pilot_fourth_from_end })
    }
}

/// `(last, fourth-from-end)` token indices of a sequence of `len` tokens.
pub fn pilot_indices(len: usize) -> Result<(usize, usize)> {
    if len < 4 {
        return Err(Error::Corpus(format!("sequence of {len} tokens has no fourth-from-end token")));
    }
    Ok((len - 1, len - 4))
}

/// Split a whitespace word into the word and a trailing sentence mark.
fn split_terminal(word: &str) -> (Option<&str>, bool) {
    let stem = word.trim_end_matches(['.', '!', '?']);
    let terminal = stem.len() < word.len();
    ((!stem.is_empty()).then_some(stem), terminal)
}

/// Documents as word lists, sentence marks normalized to [`SENTENCE_MARK`].
pub fn documents(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            continue;
        }
        for w in line.split_whitespace() {
            let (stem, terminal) = split_terminal(w);
            if let Some(s) = stem {
                cur.push(s.to_string());
            }
            if terminal {
                cur.push(SENTENCE_MARK.to_string());
            }
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub records: Vec<SequenceRecord>,
    /// How many of the requested sequences the corpus could not supply.
    pub shortfall: usize,
}

/// Select up to `count` sentence-final windows of the given length class.
pub fn filter_sequences(
    text: &str,
    tokenizer: &dyn Tokenizer,
    length_class: LengthClass,
    count: usize,
) -> Result<FilterOutcome> {
    let (lo, hi) = length_class.bounds();
    let mut records = Vec::new();
    'docs: for (doc_i, words) in documents(text).iter().enumerate() {
        let counts = words
            .iter()
            .map(|w| tokenizer.encode_word(w).map(|t| t.len()))
            .collect::<Result<Vec<_>>>()?;
        let mut floor = 0; // first word not yet used by an earlier window
        for end in 0..words.len() {
            if records.len() == count {
                break 'docs;
            }
            if words[end] != SENTENCE_MARK {
                continue;
            }
            // shortest window ending at `end` with at least `lo` tokens
            let mut start = end + 1;
            let mut n = 0;
            while start > floor && n < lo {
                start -= 1;
                n += counts[start];
            }
            if n < lo || n > hi {
                continue;
            }
            let window = words[start..=end].to_vec();
            let tokens = tokenizer.encode_words(&window)?;
            let id = format!("d{doc_i}w{start}");
            records.push(SequenceRecord::build(id, length_class, OrderClass::Ordered, window, tokens)?);
            floor = end + 1;
        }
    }
    let shortfall = count - records.len();
    Ok(FilterOutcome { records, shortfall })
}

/// Shuffle the words before the final mark. Re-draws with `seed + k` while
/// the re-tokenized length leaves the length class; `None` after
/// [`MAX_SHUFFLE_ATTEMPTS`] failures.
pub fn shuffle_words(record: &SequenceRecord, tokenizer: &dyn Tokenizer, seed: u64) -> Result<Option<SequenceRecord>> {
    let (last, body) = record
        .words
        .split_last()
        .filter(|(l, _)| l.as_str() == SENTENCE_MARK)
        .ok_or_else(|| Error::Corpus(format!("record `{}` does not end with the sentence mark", record.id)))?;
    for k in 0..MAX_SHUFFLE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
        let mut words = body.to_vec();
        words.shuffle(&mut rng);
        words.push(last.clone());
        let tokens = tokenizer.encode_words(&words)?;
        if record.length_class.admits(tokens.len()) {
            return SequenceRecord::build(record.id.clone(), record.length_class, OrderClass::Shuffled, words, tokens)
                .map(Some);
        }
    }
    Ok(None)
}

/// Paired ordered and shuffled sets. Records whose shuffle cannot be
/// brought back into the length class are dropped from both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tokenizer: String,
    pub length_class: LengthClass,
    pub seed: u64,
    pub requested: usize,
    pub shortfall: usize,
    pub dropped_pairs: usize,
    pub ordered: Vec<SequenceRecord>,
    pub shuffled: Vec<SequenceRecord>,
}

impl CorpusManifest {
    pub fn condition(&self, order: OrderClass) -> &[SequenceRecord] {
        match order {
            OrderClass::Ordered => &self.ordered,
            OrderClass::Shuffled => &self.shuffled,
        }
    }

    pub fn sequence_inputs(&self, order: OrderClass) -> Vec<SequenceInput> {
        self.condition(order)
            .iter()
            .map(|r| SequenceInput { id: r.id.clone(), tokens: r.tokens.clone() })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

/// Filter, then shuffle each record with a per-record seed derived from `seed`.
pub fn build_manifest(
    text: &str,
    tokenizer: &dyn Tokenizer,
    length_class: LengthClass,
    count: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    let filtered = filter_sequences(text, tokenizer, length_class, count)?;
    let mut ordered = Vec::with_capacity(filtered.records.len());
    let mut shuffled = Vec::with_capacity(filtered.records.len());
    let mut dropped_pairs = 0;
    for (i, rec) in filtered.records.into_iter().enumerate() {
        let rec_seed = seed.wrapping_add((i as u64).wrapping_mul(MAX_SHUFFLE_ATTEMPTS));
        match shuffle_words(&rec, tokenizer, rec_seed)? {
            Some(s) => {
                ordered.push(rec);
                shuffled.push(s);
            }
            None => dropped_pairs += 1,
        }
    }
    Ok(CorpusManifest {
        tokenizer: tokenizer.name(),
        length_class,
        seed,
        requested: count,
        shortfall: filtered.shortfall,
        dropped_pairs,
        ordered,
        shuffled,
    })
}
