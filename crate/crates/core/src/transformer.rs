//! Decoder-only transformer forward pass with per-head output masking.
//!
//! A masked head still computes its attention pattern (so it can be traced),
//! but its slice of the head concatenation is multiplied by zero before the
//! output projection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer {layer} out of range (model has {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("head {head} out of range (layer has {n_heads})")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token sequence must be non-empty")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_layer_norm: bool,
    pub use_mlp: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "d_head * n_heads = {} * {} != d_model = {}",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// All heads in (layer, head) lexicographic order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|layer| (0..self.n_heads).map(move |head| HeadId { layer, head }))
            .collect()
    }
}

/// (layer, head) coordinate of an attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: self.layer,
                n_layers: config.n_layers,
            });
        }
        if self.head >= config.n_heads {
            return Err(ModelError::HeadOutOfRange {
                head: self.head,
                n_heads: config.n_heads,
            });
        }
        Ok(())
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.H{}", self.layer, self.head)
    }
}

/// Set of heads whose concat slice is zeroed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    masked: BTreeSet<HeadId>,
}

impl HeadMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            masked: heads.into_iter().collect(),
        }
    }

    /// Every head of every layer.
    pub fn all(config: &ModelConfig) -> Self {
        Self::new(config.all_heads())
    }

    pub fn is_masked(&self, layer: usize, head: usize) -> bool {
        self.masked.contains(&HeadId { layer, head })
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadId> {
        self.masked.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.masked.iter().try_for_each(|h| h.check(config))
    }
}

impl FromIterator<HeadId> for HeadMask {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        Self::new(iter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Two-matrix feed-forward block with a GELU between.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// `(n_heads * d_head) x d_model`
    pub wo: Tensor,
    pub norm: Option<LayerNormParams>,
    pub mlp: Option<MlpWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Tensor,
    pub positional_encoding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<LayerNormParams>,
    pub unembedding: Tensor,
    pub output_bias: Tensor,
}

/// Immutable, shape-checked transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

fn expect_shape(name: impl Into<String>, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(ModelError::Shape {
            name: name.into(),
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_norm(name: &str, norm: &Option<LayerNormParams>, enabled: bool, d: usize) -> Result<()> {
    match (norm, enabled) {
        (Some(n), true) => {
            expect_shape(format!("{name}.g"), &n.gain, &[d])?;
            expect_shape(format!("{name}.b"), &n.bias, &[d])
        }
        (None, false) => Ok(()),
        (Some(_), false) => Err(ModelError::InvalidConfig(format!(
            "{name} present but use_layer_norm is false"
        ))),
        (None, true) => Err(ModelError::InvalidConfig(format!(
            "{name} missing but use_layer_norm is true"
        ))),
    }
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            n_layers,
            n_heads,
            d_model: d,
            d_head: dk,
            vocab_size: v,
            max_seq_len,
            use_layer_norm,
            use_mlp,
        } = config;
        let w = &weights;
        expect_shape("embed", &w.token_embedding, &[v, d])?;
        expect_shape("pos", &w.positional_encoding, &[max_seq_len, d])?;
        expect_shape("unembed", &w.unembedding, &[d, v])?;
        expect_shape("out_bias", &w.output_bias, &[v])?;
        if w.layers.len() != n_layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} layers given, config says {n_layers}",
                w.layers.len()
            )));
        }
        for (l, layer) in w.layers.iter().enumerate() {
            if layer.heads.len() != n_heads {
                return Err(ModelError::InvalidConfig(format!(
                    "layer {l} has {} heads, config says {n_heads}",
                    layer.heads.len()
                )));
            }
            for (h, hw) in layer.heads.iter().enumerate() {
                expect_shape(format!("L{l}.H{h}.wq"), &hw.wq, &[d, dk])?;
                expect_shape(format!("L{l}.H{h}.wk"), &hw.wk, &[d, dk])?;
                expect_shape(format!("L{l}.H{h}.wv"), &hw.wv, &[d, dk])?;
            }
            expect_shape(format!("L{l}.wo"), &layer.wo, &[n_heads * dk, d])?;
            check_norm(&format!("L{l}.ln"), &layer.norm, use_layer_norm, d)?;
            match (&layer.mlp, use_mlp) {
                (Some(mlp), true) => {
                    let hidden = mlp.w1.shape().get(1).copied().unwrap_or(0);
                    expect_shape(format!("L{l}.mlp.w1"), &mlp.w1, &[d, hidden])?;
                    expect_shape(format!("L{l}.mlp.w2"), &mlp.w2, &[hidden, d])?;
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "L{l}.mlp present but use_mlp is false"
                    )))
                }
                (None, true) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "L{l}.mlp missing but use_mlp is true"
                    )))
                }
            }
        }
        check_norm("ln_f", &w.final_norm, use_layer_norm, d)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    /// Copy of the model with the value projections of `heads` set to zero.
    /// A permanent weight-level ablation, independent of [`HeadMask`].
    pub fn with_value_weights_zeroed(&self, heads: &HeadMask) -> Result<Model> {
        heads.validate(&self.config)?;
        let mut weights = self.weights.clone();
        for id in heads.heads() {
            weights.layers[id.layer].heads[id.head]
                .wv
                .data_mut()
                .fill(0.0);
        }
        Model::new(self.config, weights)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&token) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding plus positional encoding, `T x d`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let e = self.weights.token_embedding.row(tok as usize);
            let p = self.weights.positional_encoding.row(pos);
            data.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(Tensor::new(vec![tokens.len(), d], data)?)
    }
}

/// Per-head attention patterns captured during one forward pass.
///
/// `row(head, t)` is the distribution of position `t` over positions `0..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    seq_len: usize,
    patterns: BTreeMap<HeadId, Tensor>,
}

impl AttentionTrace {
    /// Wraps externally computed `T x T` patterns; each row `t` must be a
    /// probability vector over `0..=t`.
    pub fn from_patterns(patterns: BTreeMap<HeadId, Tensor>) -> Result<Self> {
        let seq_len = patterns.values().next().map_or(0, Tensor::rows);
        for (head, p) in &patterns {
            if p.shape() != [seq_len, seq_len] {
                return Err(ModelError::Shape {
                    name: format!("attention pattern {head}"),
                    expected: vec![seq_len, seq_len],
                    actual: p.shape().to_vec(),
                });
            }
            for t in 0..seq_len {
                let row = p.row(t);
                let sum: f64 = row[..=t].iter().sum();
                if row[t + 1..].iter().any(|&x| x != 0.0)
                    || row.iter().any(|&x| x < 0.0)
                    || (sum - 1.0).abs() > 1e-9
                {
                    return Err(ModelError::InvalidConfig(format!(
                        "attention row {t} of {head} is not a causal distribution"
                    )));
                }
            }
        }
        Ok(Self { seq_len, patterns })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadId> {
        self.patterns.keys()
    }

    /// Full `T x T` causal pattern of a head.
    pub fn pattern(&self, head: HeadId) -> Option<&Tensor> {
        self.patterns.get(&head)
    }

    pub fn row(&self, head: HeadId, position: usize) -> Option<&[f64]> {
        if position >= self.seq_len {
            return None;
        }
        self.patterns
            .get(&head)
            .map(|p| &p.row(position)[..=position])
    }
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T x vocab_size`
    pub logits: Tensor,
    pub trace: Option<AttentionTrace>,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// One attention head over `x` (`T x d`): returns the head output (`T x d_k`)
/// and its causal attention pattern (`T x T`, zero above the diagonal).
pub fn attention_head(
    x: &Tensor,
    layer: usize,
    head: usize,
    model: &Model,
) -> Result<(Tensor, Tensor)> {
    let config = model.config();
    HeadId::new(layer, head).check(config)?;
    let t = x.rows();
    if t > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: t,
            max: config.max_seq_len,
        });
    }
    let hw = &model.weights().layers[layer].heads[head];
    let q = x.matmul(&hw.wq)?;
    let k = x.matmul(&hw.wk)?;
    let v = x.matmul(&hw.wv)?;
    let scale = 1.0 / (config.d_head as f64).sqrt();

    let mut attn = Tensor::zeros(&[t, t])?;
    let mut scores = Vec::with_capacity(t);
    for i in 0..t {
        scores.clear();
        let qi = q.row(i);
        for j in 0..=i {
            let dot: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            scores.push(dot * scale);
        }
        let probs = tensor::softmax(&scores)?;
        attn.row_mut(i)[..=i].copy_from_slice(&probs);
    }
    let out = attn.matmul(&v)?;
    Ok((out, attn))
}

fn masked_multi_head_inner(
    x: &Tensor,
    layer: usize,
    mask: &HeadMask,
    model: &Model,
) -> Result<(Tensor, Vec<Tensor>)> {
    let config = model.config();
    if layer >= config.n_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            n_layers: config.n_layers,
        });
    }
    let (t, dk, nh) = (x.rows(), config.d_head, config.n_heads);
    let mut concat = Tensor::zeros(&[t, nh * dk])?;
    let mut patterns = Vec::with_capacity(nh);
    for h in 0..nh {
        let (out, attn) = attention_head(x, layer, h, model)?;
        let gate = if mask.is_masked(layer, h) { 0.0 } else { 1.0 };
        for i in 0..t {
            let dst = &mut concat.row_mut(i)[h * dk..(h + 1) * dk];
            for (d, s) in dst.iter_mut().zip(out.row(i)) {
                *d = gate * s;
            }
        }
        patterns.push(attn);
    }
    let out = concat.matmul(&model.weights().layers[layer].wo)?;
    Ok((out, patterns))
}

/// `Concat(m_1 * head_1, ..., m_H * head_H) * W_O` for one layer.
pub fn masked_multi_head(x: &Tensor, layer: usize, mask: &HeadMask, model: &Model) -> Result<Tensor> {
    masked_multi_head_inner(x, layer, mask, model).map(|(out, _)| out)
}

fn normalize_rows(x: &Tensor, norm: &LayerNormParams) -> Result<Tensor> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let y = tensor::layer_norm(
            x.row(i),
            norm.gain.data(),
            norm.bias.data(),
            LAYER_NORM_EPS,
        )?;
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn mlp_block(x: &Tensor, mlp: &MlpWeights) -> Result<Tensor> {
    let mut hidden = x.matmul(&mlp.w1)?;
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    Ok(hidden.matmul(&mlp.w2)?)
}

/// Pre-norm residual forward pass. With an empty mask this is the base
/// model; otherwise the masked variant.
pub fn forward(tokens: &[u32], mask: &HeadMask, model: &Model, capture: bool) -> Result<ForwardOutput> {
    mask.validate(model.config())?;
    let mut h = model.embed(tokens)?;
    let mut patterns = capture.then(BTreeMap::new);

    for (l, layer) in model.weights().layers.iter().enumerate() {
        let attn_in = match &layer.norm {
            Some(norm) => normalize_rows(&h, norm)?,
            None => h.clone(),
        };
        let (attn_out, attn) = masked_multi_head_inner(&attn_in, l, mask, model)?;
        h.add_assign(&attn_out)?;
        if let Some(p) = patterns.as_mut() {
            for (head, pattern) in attn.into_iter().enumerate() {
                p.insert(HeadId::new(l, head), pattern);
            }
        }
        if let Some(mlp) = &layer.mlp {
            let mlp_in = match &layer.norm {
                Some(norm) => normalize_rows(&h, norm)?,
                None => h.clone(),
            };
            h.add_assign(&mlp_block(&mlp_in, mlp)?)?;
        }
    }

    let w = model.weights();
    let final_in = match &w.final_norm {
        Some(norm) => normalize_rows(&h, norm)?,
        None => h,
    };
    let mut logits = final_in.matmul(&w.unembedding)?;
    logits.add_row_vector(w.output_bias.data())?;

    Ok(ForwardOutput {
        logits,
        trace: patterns.map(|patterns| AttentionTrace {
            seq_len: tokens.len(),
            patterns,
        }),
    })
}

/// Next-token distribution from the final-position logits row.
pub fn next_token_distribution(logits_row: &[f64]) -> Result<Vec<f64>> {
    Ok(tensor::softmax(logits_row)?)
}
