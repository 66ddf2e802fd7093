//! Copy and swap tasks, masked-head sweeps and entropy comparisons.
//!
//! Every report here is a pure function of the model weights, the task
//! configuration and the seed. Samples run in parallel and are aggregated in
//! index order.

pub mod stats;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{
    conditional_entropy, generate, length_normalized_entropy, DecodeConfig, DecodeError,
    DecodeMode, MaskedModel, NextTokenModel,
};
use crate::detector::{
    generate_nith_sample, rank_heads, sample_seed, DetectorConfig, DetectorError,
    RetrievalScoreTable, VocabSplit, DEFAULT_SCORE_THRESHOLD,
};
use crate::tensor;
use crate::transformer::{HeadId, HeadMask, Model, ModelError};

pub use stats::{mean, pearson_r, sample_variance, welch_t, WelchT};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HAYSTACK_LEN: usize = 24;
pub const DEFAULT_NEEDLE_LEN: usize = 4;
pub const DEFAULT_DETECTOR_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("masking {0} heads needs a retrieval score table; run `decore detect` first or pass --detect-inline")]
    MissingScores(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Needle-in-a-haystack: reproduce the needle after its cue.
    Copy,
    /// A key/value pair in context; the value competes with the memorized
    /// answer the model prefers without the context.
    Swap,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Swap => "swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub mode: DecodeMode,
    /// Greedy: heads masked in the base model itself. Contrastive modes:
    /// heads masked in the amateur copy of the base model.
    pub masked_n: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub haystack_len: usize,
    /// Copy task only.
    pub needle_len: usize,
    /// Defaults to the argmax of the model's output bias.
    pub memorized_token: Option<u32>,
}

impl TaskConfig {
    pub fn new(task: TaskKind, mode: DecodeMode, masked_n: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            task,
            mode,
            masked_n,
            n_samples,
            seed,
            haystack_len: DEFAULT_HAYSTACK_LEN,
            needle_len: DEFAULT_NEEDLE_LEN,
            memorized_token: None,
        }
    }
}

/// Models and score table a task runs against.
#[derive(Debug, Clone, Copy)]
pub struct TaskModels<'a> {
    pub base: &'a Model,
    /// Separate amateur for entropy-lite.
    pub amateur: Option<&'a Model>,
    pub scores: Option<&'a RetrievalScoreTable>,
}

impl<'a> TaskModels<'a> {
    pub fn new(base: &'a Model) -> Self {
        Self {
            base,
            amateur: None,
            scores: None,
        }
    }

    pub fn with_scores(mut self, scores: &'a RetrievalScoreTable) -> Self {
        self.scores = Some(scores);
        self
    }

    pub fn with_amateur(mut self, amateur: &'a Model) -> Self {
        self.amateur = Some(amateur);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub schema_version: u32,
    pub task: TaskKind,
    pub mode: String,
    pub alpha: Option<f64>,
    pub masked_n: usize,
    pub masked_heads: Vec<HeadId>,
    /// Fraction of samples whose generation contains the answer run.
    pub exact_match: f64,
    /// Mean over samples of the per-step base entropy.
    pub mean_len_norm_entropy: f64,
    /// Same, for the distribution tokens were actually selected from.
    pub mean_selected_entropy: f64,
    /// Mean probability the selected distribution gives the first answer
    /// token at the first step.
    pub mean_answer_prob: f64,
    pub memorized_token: u32,
    /// Fraction of samples whose first generated token is the memorized one.
    pub memorized_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub sample_entropies: Vec<f64>,
}

impl TaskResult {
    pub fn decode_mode(&self) -> Result<DecodeMode> {
        parse_mode(&self.mode, self.alpha)
    }

    pub fn label(&self) -> String {
        format!("{}:{}:masked_n={}", self.task.name(), self.mode, self.masked_n)
    }
}

/// Parses a mode name as written in reports (`greedy`, `decore_static`, ...)
/// or on the command line (`static`, `entropy`, `entropy-lite`).
pub fn parse_mode(name: &str, alpha: Option<f64>) -> Result<DecodeMode> {
    match name {
        "greedy" => Ok(DecodeMode::Greedy),
        "static" | "decore_static" => alpha
            .map(|alpha| DecodeMode::DecoreStatic { alpha })
            .ok_or_else(|| HarnessError::Usage("static mode requires an alpha".into())),
        "entropy" | "decore_entropy" => Ok(DecodeMode::DecoreEntropy),
        "entropy-lite" | "entropy_lite" | "decore_entropy_lite" => Ok(DecodeMode::DecoreEntropyLite),
        other => Err(HarnessError::Usage(format!("unknown decode mode `{other}`"))),
    }
}

/// The memorized answer of a model: the argmax of its output bias.
pub fn memorized_token_of(model: &Model) -> u32 {
    tensor::argmax(model.weights().output_bias.data()).unwrap_or(0) as u32
}

/// Detector settings the harness uses when it scores heads itself.
pub fn default_detector_config(model: &Model, memorized_token: Option<u32>, seed: u64) -> Result<DetectorConfig> {
    let mem = memorized_token.unwrap_or_else(|| memorized_token_of(model));
    Ok(DetectorConfig {
        samples: DEFAULT_DETECTOR_SAMPLES,
        haystack_len: DEFAULT_HAYSTACK_LEN,
        needle_len: DEFAULT_NEEDLE_LEN,
        seed,
        split: VocabSplit::for_vocab(model.config().vocab_size, Some(mem))?,
    })
}

/// Top-`n` heads of the score table, or none for `n = 0`.
pub fn select_masked_heads(
    model: &Model,
    scores: Option<&RetrievalScoreTable>,
    n: usize,
) -> Result<Vec<HeadId>> {
    let total = model.config().n_total_heads();
    if n > total {
        return Err(HarnessError::Usage(format!(
            "cannot mask {n} heads, the model has {total}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scores = scores.ok_or(HarnessError::MissingScores(n))?;
    scores.check_compatible(model.config())?;
    Ok(rank_heads(scores, n, DEFAULT_SCORE_THRESHOLD)?
        .into_iter()
        .map(|r| r.head)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

/// One swap probe: `haystack_len - 1` filler tokens with `[key, value]`
/// inserted at a random offset, queried with `key`.
pub fn swap_sample(haystack_len: usize, seed: u64, split: &VocabSplit) -> Result<TaskSample> {
    if haystack_len < 1 {
        return Err(HarnessError::Usage("swap task needs haystack_len >= 1".into()));
    }
    if split.needle().len() < 2 {
        return Err(HarnessError::Config(
            "swap task needs at least two needle-vocabulary tokens".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filler: Vec<u32> = (0..haystack_len - 1)
        .map(|_| *split.haystack().choose(&mut rng).expect("non-empty pool"))
        .collect();
    let mut pool = split.needle().to_vec();
    pool.shuffle(&mut rng);
    let (key, value) = (pool[0], pool[1]);
    let at = rng.random_range(0..=filler.len());
    filler.splice(at..at, [key, value]);
    filler.push(key);
    Ok(TaskSample {
        prompt: filler,
        answer: vec![value],
    })
}

fn task_sample(cfg: &TaskConfig, index: usize, split: &VocabSplit) -> Result<TaskSample> {
    let seed = sample_seed(cfg.seed, index);
    match cfg.task {
        TaskKind::Copy => {
            let s = generate_nith_sample(cfg.haystack_len, cfg.needle_len, seed, split)?;
            Ok(TaskSample {
                prompt: s.prompt(),
                answer: s.answer,
            })
        }
        TaskKind::Swap => swap_sample(cfg.haystack_len, seed, split),
    }
}

/// Whether `answer` occurs as a contiguous run in `generated`.
pub fn contains_run(generated: &[u32], answer: &[u32]) -> bool {
    !answer.is_empty() && generated.windows(answer.len()).any(|w| w == answer)
}

#[derive(Debug, Clone, PartialEq)]
struct SampleOutcome {
    exact: bool,
    memorized: bool,
    entropy: f64,
    selected_entropy: f64,
    answer_prob: f64,
}

pub fn run_copy_task(models: TaskModels<'_>, mut cfg: TaskConfig) -> Result<TaskResult> {
    cfg.task = TaskKind::Copy;
    run_task(models, &cfg)
}

pub fn run_swap_task(models: TaskModels<'_>, mut cfg: TaskConfig) -> Result<TaskResult> {
    cfg.task = TaskKind::Swap;
    run_task(models, &cfg)
}

pub fn run_task(models: TaskModels<'_>, cfg: &TaskConfig) -> Result<TaskResult> {
    if cfg.n_samples == 0 {
        return Err(HarnessError::Usage("n_samples must be at least 1".into()));
    }
    let base_model = models.base;
    let heads = select_masked_heads(base_model, models.scores, cfg.masked_n)?;
    let mask = HeadMask::new(heads.iter().copied());
    let memorized = cfg
        .memorized_token
        .unwrap_or_else(|| memorized_token_of(base_model));
    let split = VocabSplit::for_vocab(base_model.config().vocab_size, Some(memorized))?;

    let (base, amateur) = match cfg.mode {
        DecodeMode::Greedy => (MaskedModel::new(base_model, mask)?, None),
        DecodeMode::DecoreStatic { .. } | DecodeMode::DecoreEntropy => (
            MaskedModel::unmasked(base_model),
            Some(MaskedModel::new(base_model, mask)?),
        ),
        DecodeMode::DecoreEntropyLite => {
            if cfg.masked_n != 0 {
                return Err(HarnessError::Config(
                    "entropy-lite contrasts against a separate amateur model; masked_n must be 0"
                        .into(),
                ));
            }
            let amateur = models.amateur.ok_or_else(|| {
                HarnessError::Config("entropy-lite needs an amateur model".into())
            })?;
            (MaskedModel::unmasked(base_model), Some(MaskedModel::unmasked(amateur)))
        }
    };

    let outcomes = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let sample = task_sample(cfg, i, &split)?;
            let window = base.max_seq_len();
            if sample.prompt.len() + sample.answer.len() - 1 > window {
                return Err(HarnessError::Config(format!(
                    "prompt of {} tokens plus an answer of {} does not fit the {window}-token context",
                    sample.prompt.len(),
                    sample.answer.len()
                )));
            }
            run_sample(&base, amateur.as_ref(), &sample, cfg.mode, memorized)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = outcomes.len() as f64;
    let frac = |f: fn(&SampleOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    let sample_entropies: Vec<f64> = outcomes.iter().map(|o| o.entropy).collect();
    Ok(TaskResult {
        schema_version: SCHEMA_VERSION,
        task: cfg.task,
        mode: cfg.mode.name().to_string(),
        alpha: cfg.mode.static_alpha(),
        masked_n: cfg.masked_n,
        masked_heads: heads,
        exact_match: frac(|o| o.exact),
        mean_len_norm_entropy: mean(&sample_entropies),
        mean_selected_entropy: outcomes.iter().map(|o| o.selected_entropy).sum::<f64>() / n,
        mean_answer_prob: outcomes.iter().map(|o| o.answer_prob).sum::<f64>() / n,
        memorized_token: memorized,
        memorized_rate: frac(|o| o.memorized),
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        sample_entropies,
    })
}

fn run_sample(
    base: &MaskedModel<'_>,
    amateur: Option<&MaskedModel<'_>>,
    sample: &TaskSample,
    mode: DecodeMode,
    memorized: u32,
) -> Result<SampleOutcome> {
    let config = DecodeConfig::new(mode, sample.answer.len());
    let g = generate(
        base,
        amateur.map(|a| a as &dyn NextTokenModel),
        &sample.prompt,
        &config,
    )?;
    let selected_entropy = g
        .step_log_probs
        .iter()
        .map(|lp| conditional_entropy(&lp.iter().map(|l| l.exp()).collect::<Vec<_>>()))
        .sum::<std::result::Result<f64, _>>()?
        / g.step_log_probs.len() as f64;
    Ok(SampleOutcome {
        exact: contains_run(&g.tokens, &sample.answer),
        memorized: g.tokens.first() == Some(&memorized),
        entropy: length_normalized_entropy(&g.diagnostics)?,
        selected_entropy,
        answer_prob: g.step_log_probs[0][sample.answer[0] as usize].exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub task: TaskKind,
    pub mode: String,
    pub alpha: Option<f64>,
    pub ns: Vec<usize>,
    pub exact_match: Vec<f64>,
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
    pub pearson_r_defined: bool,
    pub results: Vec<TaskResult>,
}

/// Runs the task once per masked-head count and correlates `n` with EM.
pub fn sweep_masked_heads(models: TaskModels<'_>, cfg: &TaskConfig, ns: &[usize]) -> Result<SweepResult> {
    if ns.len() < 2 {
        return Err(HarnessError::Usage(
            "a sweep needs at least two masked-head counts".into(),
        ));
    }
    let results = ns
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.masked_n = n;
            run_task(models, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let em: Vec<f64> = results.iter().map(|r| r.exact_match).collect();
    let r = pearson_r(&x, &em)?;
    Ok(SweepResult {
        schema_version: SCHEMA_VERSION,
        task: cfg.task,
        mode: cfg.mode.name().to_string(),
        alpha: cfg.mode.static_alpha(),
        ns: ns.to_vec(),
        exact_match: em,
        pearson_r: (!r.is_nan()).then_some(r),
        pearson_r_defined: !r.is_nan(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub label: String,
    pub task: TaskKind,
    pub mode: String,
    pub masked_n: usize,
    pub n_samples: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyComparison {
    pub a: String,
    pub b: String,
    /// `mean(a) - mean(b)`; negative means `a` is less uncertain.
    pub mean_diff: f64,
    /// `None` when the statistic is infinite (both samples constant).
    pub t: Option<f64>,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub schema_version: u32,
    pub entries: Vec<EntropySummary>,
    pub pairs: Vec<EntropyComparison>,
}

/// Per-result entropy summaries plus a Welch test for every ordered pair
/// `(i, j)` with `i < j`.
pub fn compare_entropy(results: &[TaskResult]) -> Result<EntropyReport> {
    if results.len() < 2 {
        return Err(HarnessError::Usage(
            "an entropy comparison needs at least two results".into(),
        ));
    }
    let mut labels: Vec<String> = results.iter().map(TaskResult::label).collect();
    for i in 0..labels.len() {
        if labels[..i].contains(&labels[i]) || labels[i + 1..].contains(&labels[i]) {
            labels[i] = format!("{}#{i}", labels[i]);
        }
    }
    let entries = results
        .iter()
        .zip(&labels)
        .map(|(r, label)| {
            if r.sample_entropies.is_empty() {
                return Err(HarnessError::Usage(format!("{label} has no per-sample entropies")));
            }
            Ok(EntropySummary {
                label: label.clone(),
                task: r.task,
                mode: r.mode.clone(),
                masked_n: r.masked_n,
                n_samples: r.sample_entropies.len(),
                mean: mean(&r.sample_entropies),
                std: sample_variance(&r.sample_entropies).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let w = welch_t(&results[i].sample_entropies, &results[j].sample_entropies)?;
            pairs.push(EntropyComparison {
                a: labels[i].clone(),
                b: labels[j].clone(),
                mean_diff: entries[i].mean - entries[j].mean,
                t: w.t.is_finite().then_some(w.t),
                dof: w.dof,
            });
        }
    }
    Ok(EntropyReport {
        schema_version: SCHEMA_VERSION,
        entries,
        pairs,
    })
}
