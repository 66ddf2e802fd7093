//! Synthetic needle-in-a-haystack probes over a split vocabulary.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DetectorError;

/// Disjoint token pools for probe construction.
///
/// The cue token precedes the needle in the context and forms the query, so a
/// copy circuit can look the needle up by matching it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSplit {
    haystack: Vec<u32>,
    needle: Vec<u32>,
    cue: u32,
}

impl VocabSplit {
    pub fn new(haystack: Vec<u32>, needle: Vec<u32>, cue: u32) -> Result<Self, DetectorError> {
        let mut h = haystack;
        let mut n = needle;
        h.sort_unstable();
        h.dedup();
        n.sort_unstable();
        n.dedup();
        if h.len() < 2 {
            return Err(DetectorError::Config(format!(
                "vocabulary split leaves {} haystack tokens, need at least 2",
                h.len()
            )));
        }
        if n.is_empty() {
            return Err(DetectorError::Config("needle vocabulary is empty".into()));
        }
        if n.iter().any(|t| h.binary_search(t).is_ok()) {
            return Err(DetectorError::Config(
                "needle and haystack vocabularies overlap".into(),
            ));
        }
        if h.binary_search(&cue).is_ok() || n.binary_search(&cue).is_ok() {
            return Err(DetectorError::Config(format!(
                "cue token {cue} must be outside both pools"
            )));
        }
        Ok(Self {
            haystack: h,
            needle: n,
            cue,
        })
    }

    /// Default split: the last token is the cue, the lower half is haystack,
    /// the rest is needle vocabulary minus `exclude`.
    pub fn for_vocab(vocab_size: usize, exclude: Option<u32>) -> Result<Self, DetectorError> {
        if vocab_size < 4 {
            return Err(DetectorError::Config(format!(
                "vocab_size {vocab_size} too small to split"
            )));
        }
        let v = vocab_size as u32;
        let half = v / 2;
        let haystack = (0..half).collect();
        let needle = (half..v - 1).filter(|&t| Some(t) != exclude).collect();
        Self::new(haystack, needle, v - 1)
    }

    pub fn haystack(&self) -> &[u32] {
        &self.haystack
    }

    pub fn needle(&self) -> &[u32] {
        &self.needle
    }

    pub fn cue(&self) -> u32 {
        self.cue
    }

    pub fn max_token(&self) -> u32 {
        let h = self.haystack.last().copied().unwrap_or(0);
        let n = self.needle.last().copied().unwrap_or(0);
        h.max(n).max(self.cue)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NithSample {
    pub context: Vec<u32>,
    pub needle: Vec<u32>,
    pub needle_span: Range<usize>,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

impl NithSample {
    /// Context followed by the query: what the model is asked to continue.
    pub fn prompt(&self) -> Vec<u32> {
        [self.context.as_slice(), self.query.as_slice()].concat()
    }
}

/// Draws one probe. `haystack_len` counts the filler plus the cue; the needle
/// is inserted right after the cue at a uniformly chosen offset, so the
/// context holds `haystack_len + needle_len` tokens.
pub fn generate_nith_sample(
    haystack_len: usize,
    needle_len: usize,
    seed: u64,
    split: &VocabSplit,
) -> Result<NithSample, DetectorError> {
    if needle_len == 0 || haystack_len < needle_len {
        return Err(DetectorError::Config(format!(
            "need haystack_len >= needle_len >= 1, got {haystack_len} and {needle_len}"
        )));
    }
    if split.needle.len() < needle_len {
        return Err(DetectorError::Config(format!(
            "needle of {needle_len} distinct tokens needs a larger needle vocabulary ({})",
            split.needle.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler: Vec<u32> = (0..haystack_len - 1)
        .map(|_| *split.haystack.choose(&mut rng).expect("non-empty pool"))
        .collect();
    let mut pool = split.needle.clone();
    pool.shuffle(&mut rng);
    let needle = pool[..needle_len].to_vec();
    let at = rng.random_range(0..haystack_len);

    let mut context = Vec::with_capacity(haystack_len + needle_len);
    context.extend_from_slice(&filler[..at]);
    context.push(split.cue);
    context.extend_from_slice(&needle);
    context.extend_from_slice(&filler[at..]);
    let start = at + 1;
    Ok(NithSample {
        context,
        needle_span: start..start + needle_len,
        answer: needle.clone(),
        needle,
        query: vec![split.cue],
    })
}

/// Per-sample seed derived from a base seed and the sample index.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
