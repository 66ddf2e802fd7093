//! Greedy and contrastive next-token selection.
//!
//! The contrastive distribution is
//! `log p(x) = (1 + a) log p_base(x) - a log p_amateur(x) - log Z`, where the
//! amateur is either the base model with its retrieval heads masked or a
//! separate smaller model. In the entropy modes `a` is the conditional
//! entropy of the base distribution at that step.

use std::collections::BTreeSet;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, TensorError};
use crate::transformer::{forward, HeadId, HeadMask, Model, ModelError};

/// Amateur probabilities are floored here before taking logs, so a token the
/// amateur rules out does not receive an infinite bonus.
pub const AMATEUR_PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("length mismatch: base has {base} entries, amateur has {amateur}")]
    Dimension { base: usize, amateur: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    DecoreStatic { alpha: f64 },
    DecoreEntropy,
    /// Entropy-controlled contrast against a separate, smaller model.
    DecoreEntropyLite,
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::DecoreStatic { .. } => "decore_static",
            DecodeMode::DecoreEntropy => "decore_entropy",
            DecodeMode::DecoreEntropyLite => "decore_entropy_lite",
        }
    }

    pub fn uses_amateur(&self) -> bool {
        !matches!(self, DecodeMode::Greedy)
    }

    pub fn static_alpha(&self) -> Option<f64> {
        match self {
            DecodeMode::DecoreStatic { alpha } => Some(*alpha),
            _ => None,
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the final token is drawn from the (possibly contrasted) distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelection {
    #[default]
    Argmax,
    Sample {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Heads masked in the amateur when it is the base model itself.
    pub masked_heads: Vec<HeadId>,
    pub max_new_tokens: usize,
    pub stop_tokens: BTreeSet<u32>,
    #[serde(default)]
    pub selection: TokenSelection,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, max_new_tokens: usize) -> Self {
        Self {
            mode,
            masked_heads: Vec::new(),
            max_new_tokens,
            stop_tokens: BTreeSet::new(),
            selection: TokenSelection::Argmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Conditional entropy of the base distribution, in nats.
    pub entropy_base: f64,
    pub alpha_used: f64,
    pub chosen_token: u32,
    pub p_base_of_chosen: f64,
    /// `None` when the amateur was not consulted (greedy mode).
    pub p_amateur_of_chosen: Option<f64>,
}

/// Renders diagnostics as JSON lines, one record per step.
pub fn diagnostics_to_json_lines(diagnostics: &[StepDiagnostics]) -> String {
    let mut out = String::new();
    for d in diagnostics {
        out.push_str(&serde_json::to_string(d).expect("plain struct serialises"));
        out.push('\n');
    }
    out
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`; clamped to
/// `[0, ln |V|]`.
pub fn conditional_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(DecodeError::Usage("entropy of an empty distribution".into()));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(DecodeError::Usage(format!(
            "distribution holds invalid probability {x}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DecodeError::Usage(format!(
            "distribution sums to {sum}, not 1"
        )));
    }
    let h: f64 = -p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

/// Contrasts two log-distributions with weight `alpha` and renormalises.
pub fn contrast_log_distributions(
    log_p_base: &[f64],
    log_p_amateur: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    if log_p_base.len() != log_p_amateur.len() {
        return Err(DecodeError::Dimension {
            base: log_p_base.len(),
            amateur: log_p_amateur.len(),
        });
    }
    if !alpha.is_finite() {
        return Err(DecodeError::Usage(format!("alpha must be finite, got {alpha}")));
    }
    let floor = AMATEUR_PROB_FLOOR.ln();
    let scores: Vec<f64> = log_p_base
        .iter()
        .zip(log_p_amateur)
        .map(|(&b, &a)| (1.0 + alpha) * b - alpha * a.max(floor))
        .collect();
    Ok(tensor::log_softmax(&scores)?)
}

fn probs_of(log_p: &[f64]) -> Vec<f64> {
    log_p.iter().map(|l| l.exp()).collect()
}

/// Result of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub token: u32,
    pub entropy_base: f64,
    pub alpha: f64,
    pub p_base_of_chosen: f64,
    pub p_amateur_of_chosen: Option<f64>,
    /// Log-distribution the token was selected from.
    pub log_probs: Vec<f64>,
}

impl StepDecision {
    pub fn diagnostics(&self, step: usize) -> StepDiagnostics {
        StepDiagnostics {
            step,
            entropy_base: self.entropy_base,
            alpha_used: self.alpha,
            chosen_token: self.token,
            p_base_of_chosen: self.p_base_of_chosen,
            p_amateur_of_chosen: self.p_amateur_of_chosen,
        }
    }
}

/// Selects the next token from base and amateur log-distributions.
///
/// Greedy mode ignores the amateur and records `alpha = 0`. Ties in the
/// argmax go to the lowest token id.
pub fn decore_step(
    log_p_base: &[f64],
    log_p_amateur: Option<&[f64]>,
    mode: DecodeMode,
) -> Result<StepDecision> {
    let p_base = probs_of(log_p_base);
    let entropy_base = conditional_entropy(&p_base)?;
    let (alpha, log_probs, amateur) = match mode {
        DecodeMode::Greedy => (0.0, log_p_base.to_vec(), None),
        _ => {
            let amateur = log_p_amateur.ok_or_else(|| {
                DecodeError::Config(format!("{mode} needs an amateur distribution"))
            })?;
            if amateur.len() != log_p_base.len() {
                return Err(DecodeError::Config(format!(
                    "vocabulary mismatch: base {} vs amateur {}",
                    log_p_base.len(),
                    amateur.len()
                )));
            }
            let alpha = mode.static_alpha().unwrap_or(entropy_base);
            (
                alpha,
                contrast_log_distributions(log_p_base, amateur, alpha)?,
                Some(amateur),
            )
        }
    };
    let token = tensor::argmax(&log_probs).expect("non-empty vocab");
    Ok(StepDecision {
        token: token as u32,
        entropy_base,
        alpha,
        p_base_of_chosen: p_base[token],
        p_amateur_of_chosen: amateur.map(|a| a[token].exp()),
        log_probs,
    })
}

/// Anything that maps a token prefix to a next-token log-distribution.
pub trait NextTokenModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

/// A model evaluated under a fixed head mask.
#[derive(Debug, Clone)]
pub struct MaskedModel<'a> {
    model: &'a Model,
    mask: HeadMask,
}

impl<'a> MaskedModel<'a> {
    pub fn new(model: &'a Model, mask: HeadMask) -> Result<Self> {
        mask.validate(model.config())?;
        Ok(Self { model, mask })
    }

    pub fn unmasked(model: &'a Model) -> Self {
        Self {
            model,
            mask: HeadMask::empty(),
        }
    }

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }
}

impl NextTokenModel for MaskedModel<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let out = forward(tokens, &self.mask, self.model, false)?;
        Ok(tensor::log_softmax(out.last_logits())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Newly generated tokens (the prompt is not included).
    pub tokens: Vec<u32>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Per-step log-distribution each token was selected from.
    pub step_log_probs: Vec<Vec<f64>>,
}

/// Autoregressive decoding. Both models read the same committed sequence.
/// Stops after a stop token (which is kept), after `max_new_tokens`, or when
/// the context window is full.
pub fn generate(
    base: &dyn NextTokenModel,
    amateur: Option<&dyn NextTokenModel>,
    prompt: &[u32],
    config: &DecodeConfig,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(DecodeError::Usage("prompt must be non-empty".into()));
    }
    if let DecodeMode::DecoreStatic { alpha } = config.mode {
        if !alpha.is_finite() {
            return Err(DecodeError::Config(format!("static alpha must be finite, got {alpha}")));
        }
    }
    let amateur = if config.mode.uses_amateur() {
        let a = amateur.ok_or_else(|| {
            DecodeError::Config(format!("{} needs an amateur model", config.mode))
        })?;
        if a.vocab_size() != base.vocab_size() {
            return Err(DecodeError::Config(format!(
                "vocabulary mismatch: base {} vs amateur {}",
                base.vocab_size(),
                a.vocab_size()
            )));
        }
        Some(a)
    } else {
        None
    };
    let window = amateur.map_or(base.max_seq_len(), |a| a.max_seq_len().min(base.max_seq_len()));
    let mut rng = match config.selection {
        TokenSelection::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        TokenSelection::Argmax => None,
    };

    let mut seq = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        diagnostics: Vec::new(),
        step_log_probs: Vec::new(),
    };
    for step in 0..config.max_new_tokens {
        if seq.len() >= window {
            break;
        }
        let (base_lp, amateur_lp) = match amateur {
            Some(a) => {
                let (b, a) = rayon::join(|| base.next_log_probs(&seq), || a.next_log_probs(&seq));
                (b?, Some(a?))
            }
            None => (base.next_log_probs(&seq)?, None),
        };
        let mut decision = decore_step(&base_lp, amateur_lp.as_deref(), config.mode)?;
        if let Some(rng) = rng.as_mut() {
            let weights = probs_of(&decision.log_probs);
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| DecodeError::Usage(format!("cannot sample: {e}")))?;
            let token = dist.sample(rng);
            decision.token = token as u32;
            decision.p_base_of_chosen = base_lp[token].exp();
            decision.p_amateur_of_chosen = amateur_lp.as_ref().map(|a| a[token].exp());
        }
        let token = decision.token;
        out.diagnostics.push(decision.diagnostics(step));
        out.step_log_probs.push(decision.log_probs);
        out.tokens.push(token);
        seq.push(token);
        if config.stop_tokens.contains(&token) {
            break;
        }
    }
    Ok(out)
}

/// Mean per-step base entropy of a generated sequence.
pub fn length_normalized_entropy(diagnostics: &[StepDiagnostics]) -> Result<f64> {
    if diagnostics.is_empty() {
        return Err(DecodeError::Usage(
            "length-normalised entropy needs at least one step".into(),
        ));
    }
    let total: f64 = diagnostics.iter().map(|d| d.entropy_base).sum();
    Ok(total / diagnostics.len() as f64)
}
