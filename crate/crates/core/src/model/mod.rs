//! Post-norm transformer encoder with a start/end span head.
//!
//! Every layer carries its own head count and feed-forward width, read off
//! the weight shapes, so pruned models with non-identical layers need no
//! extra bookkeeping.

mod eval;
mod forward;

pub use eval::{evaluate, Metrics, QaBatch, QaExample};
pub use forward::{
    attention_sublayer, feed_forward_sublayer, forward, qa_loss, GateVars, LayerVars, ModelVars,
    SpanLogits,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    /// Heads per layer at construction.
    pub n_heads: usize,
    pub d_model: usize,
    /// Feed-forward width per layer at construction.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one encoder layer. Q/K/V projections are `[d_model, heads * head_dim]`
/// with head `h` owning columns `h*head_dim..(h+1)*head_dim`; the attention
/// output projection owns the matching rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub query: Tensor,
    pub query_bias: Tensor,
    pub key: Tensor,
    pub key_bias: Tensor,
    pub value: Tensor,
    pub value_bias: Tensor,
    pub attn_out: Tensor,
    pub attn_out_bias: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_bias: Tensor,
    /// `[d_model, ff_units]`
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    /// `[ff_units, d_model]`
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub ff_ln_gain: Tensor,
    pub ff_ln_bias: Tensor,
}

const LAYER_TENSORS: [&str; 16] = [
    "query",
    "query_bias",
    "key",
    "key_bias",
    "value",
    "value_bias",
    "attn_out",
    "attn_out_bias",
    "attn_ln_gain",
    "attn_ln_bias",
    "ff_in",
    "ff_in_bias",
    "ff_out",
    "ff_out_bias",
    "ff_ln_gain",
    "ff_ln_bias",
];

impl Layer {
    fn init(d_model: usize, width: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |r: usize, c: usize, rng: &mut ChaCha8Rng| Tensor::randn(&[r, c], INIT_STD, rng);
        Self {
            query: w(d_model, width, rng),
            query_bias: Tensor::zeros(&[width]),
            key: w(d_model, width, rng),
            key_bias: Tensor::zeros(&[width]),
            value: w(d_model, width, rng),
            value_bias: Tensor::zeros(&[width]),
            attn_out: w(width, d_model, rng),
            attn_out_bias: Tensor::zeros(&[d_model]),
            attn_ln_gain: Tensor::ones(&[d_model]),
            attn_ln_bias: Tensor::zeros(&[d_model]),
            ff_in: w(d_model, d_ff, rng),
            ff_in_bias: Tensor::zeros(&[d_ff]),
            ff_out: w(d_ff, d_model, rng),
            ff_out_bias: Tensor::zeros(&[d_model]),
            ff_ln_gain: Tensor::ones(&[d_model]),
            ff_ln_bias: Tensor::zeros(&[d_model]),
        }
    }

    pub fn heads(&self, head_dim: usize) -> usize {
        self.query.shape()[1] / head_dim
    }

    pub fn ff_units(&self) -> usize {
        self.ff_in.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.attn_out,
            &self.attn_out_bias,
            &self.attn_ln_gain,
            &self.attn_ln_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
            &self.ff_ln_gain,
            &self.ff_ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.attn_out,
            &mut self.attn_out_bias,
            &mut self.attn_ln_gain,
            &mut self.attn_ln_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.ff_ln_gain,
            &mut self.ff_ln_bias,
        ]
    }

    /// Attention parameters that scale with the head count: Q/K/V weights
    /// and biases plus the output projection (its bias lives in d_model space).
    pub fn attention_params(&self) -> usize {
        self.tensors()[..7].iter().map(|t| t.len()).sum()
    }

    /// Feed-forward parameters that scale with the unit count: both linear
    /// maps and the first bias.
    pub fn feed_forward_params(&self) -> usize {
        self.tensors()[10..13].iter().map(|t| t.len()).sum()
    }
}

/// Per-layer unit counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub heads: Vec<usize>,
    pub ff: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TransformerConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_ln_gain: Tensor,
    pub embed_ln_bias: Tensor,
    pub layers: Vec<Layer>,
    /// `[d_model, 2]`, column 0 scores span starts and column 1 span ends.
    pub qa_weight: Tensor,
    pub qa_bias: Tensor,
    frozen: bool,
}

/// Builds a freshly initialized model: weights N(0, 0.02²), zero biases,
/// unit layer-norm gains. Identical seeds give bit-identical weights.
pub fn build_model(config: &TransformerConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = config.d_model;
    let token_embedding = Tensor::randn(&[config.vocab_size, e], INIT_STD, &mut rng);
    let position_embedding = Tensor::randn(&[config.max_seq_len, e], INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| Layer::init(e, e, config.d_ff, &mut rng))
        .collect();
    let qa_weight = Tensor::randn(&[e, 2], INIT_STD, &mut rng);
    Ok(Model {
        config: config.clone(),
        token_embedding,
        position_embedding,
        embed_ln_gain: Tensor::ones(&[e]),
        embed_ln_bias: Tensor::zeros(&[e]),
        layers,
        qa_weight,
        qa_bias: Tensor::zeros(&[2]),
        frozen: false,
    })
}

impl Model {
    /// Assembles a model from parts, checking every shape against the config.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: TransformerConfig,
        token_embedding: Tensor,
        position_embedding: Tensor,
        embed_ln_gain: Tensor,
        embed_ln_bias: Tensor,
        layers: Vec<Layer>,
        qa_weight: Tensor,
        qa_bias: Tensor,
    ) -> Result<Self> {
        let m = Model {
            config,
            token_embedding,
            position_embedding,
            embed_ln_gain,
            embed_ln_bias,
            layers,
            qa_weight,
            qa_bias,
            frozen: false,
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim()
    }

    pub fn sizes(&self) -> LayerSizes {
        let hd = self.head_dim();
        LayerSizes {
            heads: self.layers.iter().map(|l| l.heads(hd)).collect(),
            ff: self.layers.iter().map(Layer::ff_units).collect(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks transformer and embedding weights as fixed; gate training
    /// requires a frozen model and task training refuses one.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn unfrozen(mut self) -> Self {
        self.frozen = false;
        self
    }

    /// All weights with stable names, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
            ("embeddings.ln_gain".to_string(), &self.embed_ln_gain),
            ("embeddings.ln_bias".to_string(), &self.embed_ln_bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("qa.weight".to_string(), &self.qa_weight));
        out.push(("qa.bias".to_string(), &self.qa_bias));
        out
    }

    /// Same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_ln_gain,
            &mut self.embed_ln_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.qa_weight);
        out.push(&mut self.qa_bias);
        out
    }

    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut out: Vec<String> = ["embeddings.token", "embeddings.position", "embeddings.ln_gain", "embeddings.ln_bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..n_layers {
            out.extend(LAYER_TENSORS.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.push("qa.weight".into());
        out.push("qa.bias".into());
        out
    }

    /// Rebuilds a model from tensors in [`Model::named_tensors`] order.
    pub fn from_tensors(config: TransformerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let n = config.n_layers;
        if tensors.len() != 6 + 16 * n {
            return Err(Error::contract(format!(
                "{} layers need {} tensors, got {}",
                n,
                6 + 16 * n,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = move || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let embed_ln_gain = next();
        let embed_ln_bias = next();
        let layers = (0..n)
            .map(|_| Layer {
                query: next(),
                query_bias: next(),
                key: next(),
                key_bias: next(),
                value: next(),
                value_bias: next(),
                attn_out: next(),
                attn_out_bias: next(),
                attn_ln_gain: next(),
                attn_ln_bias: next(),
                ff_in: next(),
                ff_in_bias: next(),
                ff_out: next(),
                ff_out_bias: next(),
                ff_ln_gain: next(),
                ff_ln_bias: next(),
            })
            .collect();
        let qa_weight = next();
        let qa_bias = next();
        Self::from_parts(
            config,
            token_embedding,
            position_embedding,
            embed_ln_gain,
            embed_ln_bias,
            layers,
            qa_weight,
            qa_bias,
        )
    }

    /// Checks every weight shape against the config and the per-layer sizes
    /// implied by the projection widths.
    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let e = self.config.d_model;
        let hd = self.head_dim();
        let expect = |layer: usize, name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape {
                    layer,
                    detail: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(())
        };
        expect(0, "embeddings.token", &self.token_embedding, &[self.config.vocab_size, e])?;
        expect(0, "embeddings.position", &self.position_embedding, &[self.config.max_seq_len, e])?;
        expect(0, "embeddings.ln_gain", &self.embed_ln_gain, &[e])?;
        expect(0, "embeddings.ln_bias", &self.embed_ln_bias, &[e])?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Shape {
                layer: self.layers.len(),
                detail: format!("model has {} layers, config says {}", self.layers.len(), self.config.n_layers),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.query.shape().len() != 2 || layer.query.shape()[1] % hd != 0 {
                return Err(Error::Shape {
                    layer: l,
                    detail: format!("query width {:?} is not a multiple of head_dim {hd}", layer.query.shape()),
                });
            }
            let width = layer.query.shape()[1];
            let f = layer.ff_units();
            let shapes: [&[usize]; 16] = [
                &[e, width],
                &[width],
                &[e, width],
                &[width],
                &[e, width],
                &[width],
                &[width, e],
                &[e],
                &[e],
                &[e],
                &[e, f],
                &[f],
                &[f, e],
                &[e],
                &[e],
                &[e],
            ];
            for ((name, t), shape) in LAYER_TENSORS.iter().zip(layer.tensors()).zip(shapes) {
                expect(l, name, t, shape)?;
            }
        }
        expect(0, "qa.weight", &self.qa_weight, &[e, 2])?;
        expect(0, "qa.bias", &self.qa_bias, &[2])?;
        Ok(())
    }
}

/// Exact number of scalar parameters.
pub fn count_params(model: &Model) -> usize {
    model.named_tensors().iter().map(|(_, t)| t.len()).sum()
}

/// Multiply-add FLOPs (2 per MAC) of the encoder layers for one forward
/// pass over `batch` sequences of length `seq`.
///
/// Per layer `l` with `h` heads of width `d`, `F` ff units, `E = d_model`,
/// and `T = batch * seq` tokens:
/// * attention: `2·T·E·h·d·3` (Q/K/V) + `2·T·h·d·E` (output)
///   + `2·batch·h·seq²·d·2` (scores and context)
/// * feed-forward: `2·T·E·F·2` (both linear maps)
///
/// Embedding lookups, layer norms, softmax and the span head are not
/// counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention: u64,
    pub feed_forward: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.attention + self.feed_forward
    }
}

pub fn count_flops(model: &Model, seq_len: usize, batch: usize) -> FlopCount {
    let e = model.config.d_model as u64;
    let hd = model.head_dim() as u64;
    let (s, b) = (seq_len as u64, batch as u64);
    let tokens = b * s;
    let sizes = model.sizes();
    let mut out = FlopCount::default();
    for (&h, &f) in sizes.heads.iter().zip(&sizes.ff) {
        let width = h as u64 * hd;
        out.attention += 2 * tokens * e * width * 3 + 2 * tokens * width * e + 2 * b * h as u64 * s * s * hd * 2;
        out.feed_forward += 2 * tokens * e * f as u64 * 2;
    }
    out
}
