//! Character LM: embedding, stacked LSTM, LM softmax head and one linear
//! morphology head per feature, attached to a configurable layer.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, CKPT_HEADER};
pub use forward::{loss, LayerState, LossMask, LossNodes, Mode, ParamNodes, Trunk};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conllu::MorphSchema;
use crate::diff::{DiffError, Real, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("character id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("batch has no {0} targets")]
    MissingTargets(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// 1-based layer whose output feeds the morphology heads.
    pub mtl_layer: usize,
    pub dropout: f64,
    /// Also apply dropout to the embedding output.
    pub embed_dropout: bool,
    pub schema: MorphSchema,
}

impl ModelConfig {
    /// Two-layer UD-style defaults: 512-d embeddings, 1024-d LSTM, dropout 0.5.
    pub fn new(vocab_size: usize, schema: MorphSchema) -> Self {
        Self {
            vocab_size,
            embed_dim: 512,
            hidden_dim: 1024,
            num_layers: 2,
            mtl_layer: 2,
            dropout: 0.5,
            embed_dropout: true,
            schema,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 1 || self.embed_dim < 1 || self.hidden_dim < 1 || self.num_layers < 1 {
            return err(format!(
                "dimensions must be >= 1 (vocab {}, embed {}, hidden {}, layers {})",
                self.vocab_size, self.embed_dim, self.hidden_dim, self.num_layers
            ));
        }
        if self.mtl_layer < 1 || self.mtl_layer > self.num_layers {
            return err(format!("mtl_layer {} outside 1..={}", self.mtl_layer, self.num_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn morph_classes(&self) -> Vec<usize> {
        self.schema.class_counts()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// One LSTM layer. Gate columns are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<F> {
    pub w_input: Tensor<F>,
    pub w_hidden: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub embedding: Tensor<F>,
    pub layers: Vec<LstmLayer<F>>,
    pub lm_head: Linear<F>,
    pub morph_heads: Vec<Linear<F>>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        Self {
            embedding: Tensor::zeros(&[cfg.vocab_size, cfg.embed_dim]),
            layers: (0..cfg.num_layers)
                .map(|l| LstmLayer {
                    w_input: Tensor::zeros(&[if l == 0 { cfg.embed_dim } else { h }, 4 * h]),
                    w_hidden: Tensor::zeros(&[h, 4 * h]),
                    bias: Tensor::zeros(&[4 * h]),
                })
                .collect(),
            lm_head: Linear {
                weight: Tensor::zeros(&[h, cfg.vocab_size]),
                bias: Tensor::zeros(&[cfg.vocab_size]),
            },
            morph_heads: cfg
                .morph_classes()
                .into_iter()
                .map(|c| Linear {
                    weight: Tensor::zeros(&[h, c]),
                    bias: Tensor::zeros(&[c]),
                })
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.0.
    /// Deterministic for a given `(cfg, seed)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let h = cfg.hidden_dim;
        for (name, t) in p.named_mut() {
            if name.ends_with("bias") {
                if name.starts_with("lstm.") {
                    t.data_mut()[h..2 * h].fill(F::ONE);
                }
                continue;
            }
            let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
            let limit = glorot_limit(fan_in, fan_out);
            for v in t.data_mut() {
                *v = F::from_f64(rng.gen_range(-limit..=limit));
            }
        }
        p
    }

    /// Tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm.{l}.w_input"), &layer.w_input));
            out.push((format!("lstm.{l}.w_hidden"), &layer.w_hidden));
            out.push((format!("lstm.{l}.bias"), &layer.bias));
        }
        out.push(("lm_head.weight".into(), &self.lm_head.weight));
        out.push(("lm_head.bias".into(), &self.lm_head.bias));
        for (i, head) in self.morph_heads.iter().enumerate() {
            out.push((format!("morph.{i}.weight"), &head.weight));
            out.push((format!("morph.{i}.bias"), &head.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("lstm.{l}.w_input"), &mut layer.w_input));
            out.push((format!("lstm.{l}.w_hidden"), &mut layer.w_hidden));
            out.push((format!("lstm.{l}.bias"), &mut layer.bias));
        }
        out.push(("lm_head.weight".into(), &mut self.lm_head.weight));
        out.push(("lm_head.bias".into(), &mut self.lm_head.bias));
        for (i, head) in self.morph_heads.iter_mut().enumerate() {
            out.push((format!("morph.{i}.weight"), &mut head.weight));
            out.push((format!("morph.{i}.bias"), &mut head.bias));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayer {
                    w_input: l.w_input.cast(),
                    w_hidden: l.w_hidden.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            lm_head: Linear {
                weight: self.lm_head.weight.cast(),
                bias: self.lm_head.bias.cast(),
            },
            morph_heads: self
                .morph_heads
                .iter()
                .map(|h| Linear {
                    weight: h.weight.cast(),
                    bias: h.bias.cast(),
                })
                .collect(),
        }
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::zeros(cfg);
        let (got, want) = (self.named(), expected.named());
        if got.len() != want.len() {
            return Err(ModelError::Config(format!("expected {} tensors, found {}", want.len(), got.len())));
        }
        for ((gn, gt), (wn, wt)) in got.iter().zip(&want) {
            if gn != wn || gt.shape() != wt.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {gn} {:?} does not match expected {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<F>) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let schema = MorphSchema::from_features([("Number", vec!["Sing", "Plur"]), ("Tense", vec!["Past"])]);
        ModelConfig {
            embed_dim: 6,
            hidden_dim: 5,
            num_layers: 2,
            mtl_layer: 1,
            ..ModelConfig::new(11, schema)
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = cfg();
        let a = ModelParams::<f32>::init(&c, 3);
        assert_eq!(a, ModelParams::init(&c, 3));
        assert_ne!(a, ModelParams::init(&c, 4));
        for layer in &a.layers {
            assert!(layer.bias.data()[5..10].iter().all(|&v| v == 1.0));
            assert!(layer.bias.data()[..5].iter().all(|&v| v == 0.0));
            assert!(layer.bias.data()[10..].iter().all(|&v| v == 0.0));
        }
        let limit = glorot_limit(11, 6) as f32;
        assert!(a.embedding.data().iter().all(|v| v.abs() <= limit));
        assert!(a.embedding.data().iter().any(|v| v.abs() > limit * 0.5));
        assert_eq!(a.morph_heads[0].weight.shape(), &[5, 3]);
        assert_eq!(a.morph_heads[1].weight.shape(), &[5, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.mtl_layer = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        c.mtl_layer = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_check_rejects_mismatch() {
        let c = cfg();
        let p = ModelParams::<f32>::zeros(&c);
        assert!(p.check_shapes(&c).is_ok());
        let mut other = c.clone();
        other.hidden_dim = 4;
        assert!(p.check_shapes(&other).is_err());
    }
}
