//! Hand-wired two-layer induction circuit.
//!
//! Residual stream layout (`V` = vocab, `P` = max_seq_len):
//!
//! | block   | width | written by                          |
//! |---------|-------|-------------------------------------|
//! | `TOK`   | V     | token embedding (one-hot)           |
//! | `PREV`  | V     | layer-0 heads: previous token       |
//! | `OUT`   | V     | layer-1 head 0: copied token        |
//! | `POS`   | P     | positional table (one-hot)          |
//! | `CONST` | 1     | positional table (always 1)         |
//!
//! Layer 0 has two identical previous-token heads that each write half of
//! `PREV`, so either one alone still drives the induction key. Layer 1 head 0
//! matches its own token against `PREV` of earlier positions and copies the
//! token found there into `OUT`; only `OUT` is read by the unembedding.
//! Layer 1 head 1 attends uniformly and writes nothing.
//!
//! All weights are rounded to `f32` so the model survives a `DCRM` round trip
//! bit-exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{round_f32, ZooError};
use crate::tensor::{self, Tensor};
use crate::transformer::{
    forward, HeadId, HeadMask, HeadWeights, LayerWeights, Model, ModelConfig, ModelWeights,
};

/// Score gap (pre-softmax) between the previous position and any other for
/// the layer-0 heads.
const PREV_TOKEN_SHARPNESS: f64 = 20.0;
/// Score gap between a matching and a non-matching key for the induction head.
const INDUCTION_SHARPNESS: f64 = 20.0;
/// Probability the intact circuit puts on the copied token.
const COPY_CONFIDENCE: f64 = 0.995;
/// Prompts per clause checked when a model is built.
const BUILD_CHECK_PROMPTS: usize = 64;
const BUILD_CHECK_SEED: u64 = 0x1d0c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WiredModelSpec {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub memorized_token: u32,
    pub memorized_bias_strength: f64,
}

impl Default for WiredModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_seq_len: 40,
            memorized_token: 0,
            memorized_bias_strength: 2.0,
        }
    }
}

impl WiredModelSpec {
    /// The induction head. Fixed by the circuit topology.
    pub const RETRIEVAL_HEAD: HeadId = HeadId::new(1, 0);
    /// The primary previous-token head.
    pub const PREVIOUS_TOKEN_HEAD: HeadId = HeadId::new(0, 0);

    pub fn validate(&self) -> Result<(), ZooError> {
        if self.vocab_size < 8 {
            return Err(ZooError::InvalidSpec(format!(
                "vocab_size must be >= 8, got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 16 {
            return Err(ZooError::InvalidSpec(format!(
                "max_seq_len must be >= 16, got {}",
                self.max_seq_len
            )));
        }
        if self.memorized_token as usize >= self.vocab_size {
            return Err(ZooError::InvalidSpec(format!(
                "memorized_token {} outside vocabulary of size {}",
                self.memorized_token, self.vocab_size
            )));
        }
        if !self.memorized_bias_strength.is_finite() || self.memorized_bias_strength < 0.0 {
            return Err(ZooError::InvalidSpec(format!(
                "memorized_bias_strength must be finite and >= 0, got {}",
                self.memorized_bias_strength
            )));
        }
        Ok(())
    }
}

struct Layout {
    vocab: usize,
    positions: usize,
    d_head: usize,
    d_model: usize,
}

impl Layout {
    fn new(spec: &WiredModelSpec) -> Self {
        let (v, p) = (spec.vocab_size, spec.max_seq_len);
        let residual = 3 * v + p + 1;
        let d_head = (v + 1).max(p).max(residual.div_ceil(2));
        Self {
            vocab: v,
            positions: p,
            d_head,
            d_model: 2 * d_head,
        }
    }
    fn tok(&self) -> usize {
        0
    }
    fn prev(&self) -> usize {
        self.vocab
    }
    fn out(&self) -> usize {
        2 * self.vocab
    }
    fn pos(&self) -> usize {
        3 * self.vocab
    }
    fn constant(&self) -> usize {
        3 * self.vocab + self.positions
    }
}

fn zeros(r: usize, c: usize) -> Tensor {
    Tensor::zeros(&[r, c]).expect("positive dims")
}

fn copy_token_values(lay: &Layout) -> Tensor {
    let mut wv = zeros(lay.d_model, lay.d_head);
    for i in 0..lay.vocab {
        wv.set(lay.tok() + i, i, 1.0);
    }
    wv
}

fn previous_token_head(lay: &Layout) -> HeadWeights {
    let q_scale = round_f32(PREV_TOKEN_SHARPNESS * (lay.d_head as f64).sqrt());
    let mut wq = zeros(lay.d_model, lay.d_head);
    let mut wk = zeros(lay.d_model, lay.d_head);
    for p in 0..lay.positions {
        wq.set(lay.pos() + p, p, q_scale);
        if p + 1 < lay.positions {
            wk.set(lay.pos() + p, p + 1, 1.0);
        }
    }
    HeadWeights {
        wq,
        wk,
        wv: copy_token_values(lay),
    }
}

fn induction_head(lay: &Layout) -> HeadWeights {
    let q_scale = round_f32(INDUCTION_SHARPNESS * (lay.d_head as f64).sqrt());
    let mut wq = zeros(lay.d_model, lay.d_head);
    let mut wk = zeros(lay.d_model, lay.d_head);
    for i in 0..lay.vocab {
        wq.set(lay.tok() + i, i, q_scale);
        wk.set(lay.prev() + i, i, 1.0);
    }
    // Position 0 has no predecessor; its layer-0 heads attend to itself.
    // Penalise it as an induction target by the same margin as a match.
    wq.set(lay.constant(), lay.vocab, q_scale);
    wk.set(lay.pos(), lay.vocab, -1.0);
    HeadWeights {
        wq,
        wk,
        wv: copy_token_values(lay),
    }
}

fn copy_logit(spec: &WiredModelSpec) -> f64 {
    let odds = COPY_CONFIDENCE / (1.0 - COPY_CONFIDENCE);
    let rivals = (spec.vocab_size - 2) as f64 + spec.memorized_bias_strength.exp();
    round_f32((odds * rivals).ln())
}

/// Builds the wired model and checks its behavioural contract on a seeded
/// prompt set. Fails with the violated clause if the check does not pass.
pub fn build_induction_model(spec: &WiredModelSpec) -> Result<Model, ZooError> {
    spec.validate()?;
    let lay = Layout::new(spec);
    let (v, d, dk) = (lay.vocab, lay.d_model, lay.d_head);

    let mut embed = zeros(v, d);
    for t in 0..v {
        embed.set(t, lay.tok() + t, 1.0);
    }
    let mut pos = zeros(spec.max_seq_len, d);
    for p in 0..spec.max_seq_len {
        pos.set(p, lay.pos() + p, 1.0);
        pos.set(p, lay.constant(), 1.0);
    }

    let mut wo0 = zeros(2 * dk, d);
    for h in 0..2 {
        for i in 0..v {
            wo0.set(h * dk + i, lay.prev() + i, 0.5);
        }
    }
    let layer0 = LayerWeights {
        heads: vec![previous_token_head(&lay), previous_token_head(&lay)],
        wo: wo0,
        norm: None,
        mlp: None,
    };

    let m = copy_logit(spec);
    let mut wo1 = zeros(2 * dk, d);
    for i in 0..v {
        wo1.set(i, lay.out() + i, m);
    }
    let idle = HeadWeights {
        wq: zeros(d, dk),
        wk: zeros(d, dk),
        wv: copy_token_values(&lay),
    };
    let layer1 = LayerWeights {
        heads: vec![induction_head(&lay), idle],
        wo: wo1,
        norm: None,
        mlp: None,
    };

    let mut unembed = zeros(d, v);
    for i in 0..v {
        unembed.set(lay.out() + i, i, 1.0);
    }
    let mut bias = Tensor::zeros(&[v]).expect("positive dims");
    bias.data_mut()[spec.memorized_token as usize] = round_f32(spec.memorized_bias_strength);

    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: d,
        d_head: dk,
        vocab_size: v,
        max_seq_len: spec.max_seq_len,
        use_layer_norm: false,
        use_mlp: false,
    };
    let weights = ModelWeights {
        token_embedding: embed,
        positional_encoding: pos,
        layers: vec![layer0, layer1],
        final_norm: None,
        unembedding: unembed,
        output_bias: bias,
    };
    let model = Model::new(config, weights)?;

    let report = check_contract(&model, spec, BUILD_CHECK_PROMPTS, BUILD_CHECK_SEED)?;
    report.ensure(spec)?;
    Ok(model)
}

/// A distinct-token prompt `[.., a, b, .., a]` and its expected continuation `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternedPrompt {
    pub tokens: Vec<u32>,
    pub expected: u32,
}

/// Draws a prompt of distinct tokens with one repeated token at the end.
pub fn patterned_prompt(rng: &mut impl Rng, vocab_size: usize, max_len: usize) -> PatternedPrompt {
    let longest = max_len.min(vocab_size + 1);
    let n = rng.random_range(3..=longest);
    let mut pool: Vec<u32> = (0..vocab_size as u32).collect();
    pool.shuffle(rng);
    let mut tokens = pool[..n - 1].to_vec();
    let i = rng.random_range(0..=n - 3);
    let expected = tokens[i + 1];
    tokens.push(tokens[i]);
    PatternedPrompt { tokens, expected }
}

/// Violation counts per contract clause over a seeded prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractReport {
    pub prompts: usize,
    /// Copy clause: greedy token is `b` with probability >= 0.99.
    pub copy_violations: usize,
    /// Masked clause: with the retrieval head masked, greedy token is the
    /// memorized token. Only counted when the bias strength is >= 1.
    pub memorized_violations: usize,
    /// Previous-token clause: layer-0 head 0 attends to `t - 1` for `t >= 1`.
    pub previous_token_violations: usize,
}

impl ContractReport {
    pub fn ensure(&self, spec: &WiredModelSpec) -> Result<(), ZooError> {
        let allowed_copy = self.prompts / 100;
        if self.copy_violations > allowed_copy {
            return Err(ZooError::Contract(format!(
                "copy clause failed on {} of {} prompts",
                self.copy_violations, self.prompts
            )));
        }
        if spec.memorized_bias_strength >= 1.0 && self.memorized_violations > 0 {
            return Err(ZooError::Contract(format!(
                "memorized clause failed on {} of {} prompts",
                self.memorized_violations, self.prompts
            )));
        }
        if self.previous_token_violations > 0 {
            return Err(ZooError::Contract(format!(
                "previous-token clause failed on {} of {} prompts",
                self.previous_token_violations, self.prompts
            )));
        }
        Ok(())
    }
}

/// Evaluates every contract clause on `n_prompts` seeded patterned prompts.
pub fn check_contract(
    model: &Model,
    spec: &WiredModelSpec,
    n_prompts: usize,
    seed: u64,
) -> Result<ContractReport, ZooError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retrieval_masked = HeadMask::new([WiredModelSpec::RETRIEVAL_HEAD]);
    let mut report = ContractReport {
        prompts: n_prompts,
        copy_violations: 0,
        memorized_violations: 0,
        previous_token_violations: 0,
    };
    for _ in 0..n_prompts {
        let prompt = patterned_prompt(&mut rng, spec.vocab_size, spec.max_seq_len);

        let base = forward(&prompt.tokens, &HeadMask::empty(), model, true)?;
        let p = tensor::softmax(base.last_logits())?;
        let greedy = tensor::argmax(&p).map(|t| t as u32);
        if greedy != Some(prompt.expected) || p[prompt.expected as usize] < 0.99 {
            report.copy_violations += 1;
        }

        let trace = base.trace.as_ref().expect("capture requested");
        let prev_ok = (1..prompt.tokens.len()).all(|t| {
            trace
                .row(WiredModelSpec::PREVIOUS_TOKEN_HEAD, t)
                .and_then(tensor::argmax)
                == Some(t - 1)
        });
        if !prev_ok {
            report.previous_token_violations += 1;
        }

        if spec.memorized_bias_strength >= 1.0 {
            let masked = forward(&prompt.tokens, &retrieval_masked, model, false)?;
            if tensor::argmax(masked.last_logits()) != Some(spec.memorized_token as usize) {
                report.memorized_violations += 1;
            }
        }
    }
    Ok(report)
}
