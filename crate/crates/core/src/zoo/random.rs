use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::round_f32;
use crate::tensor::Tensor;
use crate::transformer::{
    HeadWeights, LayerNormParams, LayerWeights, MlpWeights, Model, ModelConfig, ModelError,
    ModelWeights,
};

pub const RANDOM_WEIGHT_STD: f64 = 0.1;
const MLP_EXPANSION: usize = 4;

struct Sampler {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Sampler {
    fn tensor(&mut self, shape: &[usize], offset: f64) -> Result<Tensor, ModelError> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| round_f32(offset + self.normal.sample(&mut self.rng)))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }

    fn norm(&mut self, d: usize) -> Result<LayerNormParams, ModelError> {
        Ok(LayerNormParams {
            gain: self.tensor(&[d], 1.0)?,
            bias: self.tensor(&[d], 0.0)?,
        })
    }
}

/// Model with i.i.d. `N(0, RANDOM_WEIGHT_STD^2)` weights (layer-norm gains
/// centred on 1), fully determined by `seed`.
pub fn random_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        normal: Normal::new(0.0, RANDOM_WEIGHT_STD).expect("positive std"),
    };
    let ModelConfig {
        d_model: d,
        d_head: dk,
        vocab_size: v,
        n_heads,
        ..
    } = config;

    let token_embedding = s.tensor(&[v, d], 0.0)?;
    let positional_encoding = s.tensor(&[config.max_seq_len, d], 0.0)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            heads.push(HeadWeights {
                wq: s.tensor(&[d, dk], 0.0)?,
                wk: s.tensor(&[d, dk], 0.0)?,
                wv: s.tensor(&[d, dk], 0.0)?,
            });
        }
        let wo = s.tensor(&[n_heads * dk, d], 0.0)?;
        let norm = if config.use_layer_norm {
            Some(s.norm(d)?)
        } else {
            None
        };
        let mlp = if config.use_mlp {
            Some(MlpWeights {
                w1: s.tensor(&[d, MLP_EXPANSION * d], 0.0)?,
                w2: s.tensor(&[MLP_EXPANSION * d, d], 0.0)?,
            })
        } else {
            None
        };
        layers.push(LayerWeights {
            heads,
            wo,
            norm,
            mlp,
        });
    }
    let final_norm = if config.use_layer_norm {
        Some(s.norm(d)?)
    } else {
        None
    };
    let unembedding = s.tensor(&[d, v], 0.0)?;
    let output_bias = s.tensor(&[v], 0.0)?;

    Model::new(
        config,
        ModelWeights {
            token_embedding,
            positional_encoding,
            layers,
            final_norm,
            unembedding,
            output_bias,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{forward, HeadMask};

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            vocab_size: 20,
            max_seq_len: 24,
            use_layer_norm: true,
            use_mlp: true,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(random_model(config(), 3).unwrap(), random_model(config(), 3).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(random_model(config(), 3).unwrap(), random_model(config(), 4).unwrap());
    }

    #[test]
    fn logits_are_finite() {
        let model = random_model(config(), 5).unwrap();
        let out = forward(&[1, 19, 4, 4, 0, 7], &HeadMask::empty(), &model, false).unwrap();
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_invalid_config() {
        let bad = ModelConfig { d_head: 5, ..config() };
        assert!(random_model(bad, 0).is_err());
    }
}
