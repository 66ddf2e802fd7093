//! Retrieval-head detection by copy-paste scoring on needle probes.
//!
//! A head copy-pastes needle token `j` at a decoding step when the greedy
//! token equals `needle[j]` and the head's attention argmax at that step is
//! the position of `needle[j]` in the context. A head's retrieval score on a
//! sample is the fraction of distinct needle offsets it copy-pasted; the
//! table score is the mean over samples.

mod nith;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor;
use crate::transformer::{forward, AttentionTrace, HeadId, HeadMask, Model, ModelConfig, ModelError};

pub use nith::{generate_nith_sample, sample_seed, NithSample, VocabSplit};

/// Retrieval score above which a head counts as a retrieval head.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("top_n = {top_n} exceeds the {total} heads in the table")]
    Range { top_n: usize, total: usize },
    #[error("score table error: {0}")]
    Table(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CopyEvent {
    pub head: HeadId,
    pub needle_offset: usize,
}

/// Copy-paste events of every head at the step emitted from `position`.
/// Attention argmax ties resolve to the lowest position.
pub fn detect_copy_paste(
    position: usize,
    generated_token: u32,
    trace: &AttentionTrace,
    needle_span: &Range<usize>,
    needle: &[u32],
) -> BTreeSet<CopyEvent> {
    let Some(offset) = needle.iter().position(|&t| t == generated_token) else {
        return BTreeSet::new();
    };
    let source = needle_span.start + offset;
    trace
        .heads()
        .filter(|&&head| {
            trace
                .row(head, position)
                .and_then(tensor::argmax)
                .is_some_and(|focus| focus == source)
        })
        .map(|&head| CopyEvent {
            head,
            needle_offset: offset,
        })
        .collect()
}

/// Outcome of greedily decoding one probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCopies {
    pub needle_len: usize,
    pub generated: Vec<u32>,
    /// Distinct needle offsets each head copy-pasted.
    pub copied: BTreeMap<HeadId, BTreeSet<usize>>,
}

/// Greedy-decodes the needle from `sample`, collecting copy events. Decoding
/// stops at the first token that deviates from the needle.
pub fn probe_sample(model: &Model, sample: &NithSample) -> Result<SampleCopies, DetectorError> {
    let mut seq = sample.prompt();
    let needed = seq.len() + sample.needle.len() - 1;
    if needed > model.config().max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: needed,
            max: model.config().max_seq_len,
        }
        .into());
    }
    let mut out = SampleCopies {
        needle_len: sample.needle.len(),
        generated: Vec::new(),
        copied: BTreeMap::new(),
    };
    for &expected in &sample.needle {
        let pass = forward(&seq, &HeadMask::empty(), model, true)?;
        let token = tensor::argmax(pass.last_logits()).expect("non-empty vocab") as u32;
        let trace = pass.trace.as_ref().expect("capture requested");
        for event in detect_copy_paste(seq.len() - 1, token, trace, &sample.needle_span, &sample.needle) {
            out.copied
                .entry(event.head)
                .or_default()
                .insert(event.needle_offset);
        }
        out.generated.push(token);
        if token != expected {
            break;
        }
        seq.push(token);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScoreTable {
    n_layers: usize,
    n_heads: usize,
    scores: BTreeMap<HeadId, f64>,
    sample_count: usize,
}

impl RetrievalScoreTable {
    /// Builds a table from explicit scores; every head of the grid must appear.
    pub fn from_scores(
        n_layers: usize,
        n_heads: usize,
        scores: BTreeMap<HeadId, f64>,
        sample_count: usize,
    ) -> Result<Self, DetectorError> {
        if scores.len() != n_layers * n_heads
            || scores
                .keys()
                .any(|h| h.layer >= n_layers || h.head >= n_heads)
        {
            return Err(DetectorError::Table(format!(
                "table must cover exactly {n_layers} x {n_heads} heads, got {}",
                scores.len()
            )));
        }
        if let Some((h, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(DetectorError::Table(format!("score {s} of {h} outside [0, 1]")));
        }
        Ok(Self {
            n_layers,
            n_heads,
            scores,
            sample_count,
        })
    }

    pub fn score(&self, head: HeadId) -> Option<f64> {
        self.scores.get(&head).copied()
    }

    pub fn scores(&self) -> &BTreeMap<HeadId, f64> {
        &self.scores
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Checks the table was produced for a model with this head grid.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<(), DetectorError> {
        if self.n_layers != config.n_layers || self.n_heads != config.n_heads {
            return Err(DetectorError::Table(format!(
                "table covers {} x {} heads, model has {} x {}",
                self.n_layers, self.n_heads, config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }

    /// Heads sorted by score descending; ties go to the lower layer, then the
    /// lower head index.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = self.scores.iter().map(|(h, s)| (*h, *s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), DetectorError> {
        let mut w = csv::Writer::from_writer(writer);
        for (head, score) in self.ranked() {
            w.serialize(ScoreRow {
                layer: head.layer,
                head: head.head,
                score,
                samples: self.sample_count,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, DetectorError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["layer", "head", "score", "samples"] {
            return Err(DetectorError::Table(format!(
                "unexpected header {:?}, expected layer,head,score,samples",
                header
            )));
        }
        let mut scores = BTreeMap::new();
        let mut samples = None;
        for row in r.deserialize() {
            let row: ScoreRow = row?;
            if *samples.get_or_insert(row.samples) != row.samples {
                return Err(DetectorError::Table("inconsistent sample counts".into()));
            }
            if scores
                .insert(HeadId::new(row.layer, row.head), row.score)
                .is_some()
            {
                return Err(DetectorError::Table(format!(
                    "duplicate row for L{}.H{}",
                    row.layer, row.head
                )));
            }
        }
        let n_layers = scores.keys().map(|h| h.layer + 1).max().unwrap_or(0);
        let n_heads = scores.keys().map(|h| h.head + 1).max().unwrap_or(0);
        Self::from_scores(n_layers, n_heads, scores, samples.unwrap_or(0))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    layer: usize,
    head: usize,
    score: f64,
    samples: usize,
}

/// Aggregates per-sample copy sets into a score table over the model's heads.
pub fn retrieval_score(
    config: &ModelConfig,
    samples: &[SampleCopies],
) -> Result<RetrievalScoreTable, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::Config("retrieval scoring needs at least one sample".into()));
    }
    let n = samples.len() as f64;
    let scores = config
        .all_heads()
        .into_iter()
        .map(|head| {
            let total: f64 = samples
                .iter()
                .map(|s| {
                    let copied = s.copied.get(&head).map_or(0, BTreeSet::len);
                    copied as f64 / s.needle_len as f64
                })
                .sum();
            (head, total / n)
        })
        .collect();
    RetrievalScoreTable::from_scores(config.n_layers, config.n_heads, scores, samples.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub head: HeadId,
    pub score: f64,
    pub above_threshold: bool,
}

/// Top `top_n` heads by score. Heads under `threshold` are kept and flagged.
pub fn rank_heads(
    table: &RetrievalScoreTable,
    top_n: usize,
    threshold: f64,
) -> Result<Vec<RankedHead>, DetectorError> {
    if top_n > table.n_total_heads() {
        return Err(DetectorError::Range {
            top_n,
            total: table.n_total_heads(),
        });
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DetectorError::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(table
        .ranked()
        .into_iter()
        .take(top_n)
        .map(|(head, score)| RankedHead {
            head,
            score,
            above_threshold: score >= threshold,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub samples: usize,
    pub haystack_len: usize,
    pub needle_len: usize,
    pub seed: u64,
    pub split: VocabSplit,
}

/// Probes `config.samples` seeded samples (in parallel) and scores every head.
pub fn detect_retrieval_heads(
    model: &Model,
    config: &DetectorConfig,
) -> Result<RetrievalScoreTable, DetectorError> {
    if config.split.max_token() as usize >= model.config().vocab_size {
        return Err(DetectorError::Config(format!(
            "vocabulary split uses token {} but the model vocabulary has {} tokens",
            config.split.max_token(),
            model.config().vocab_size
        )));
    }
    let copies = (0..config.samples)
        .into_par_iter()
        .map(|i| {
            let sample = generate_nith_sample(
                config.haystack_len,
                config.needle_len,
                sample_seed(config.seed, i),
                &config.split,
            )?;
            probe_sample(model, &sample)
        })
        .collect::<Result<Vec<_>, _>>()?;
    retrieval_score(model.config(), &copies)
}
