use super::{Activation, Model, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// One layer's weights bound into a graph.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub query: Var,
    pub query_bias: Var,
    pub key: Var,
    pub key_bias: Var,
    pub value: Var,
    pub value_bias: Var,
    pub attn_out: Var,
    pub attn_out_bias: Var,
    pub attn_ln_gain: Var,
    pub attn_ln_bias: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
    pub ff_ln_gain: Var,
    pub ff_ln_bias: Var,
}

impl LayerVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            query: v[0],
            query_bias: v[1],
            key: v[2],
            key_bias: v[3],
            value: v[4],
            value_bias: v[5],
            attn_out: v[6],
            attn_out_bias: v[7],
            attn_ln_gain: v[8],
            attn_ln_bias: v[9],
            ff_in: v[10],
            ff_in_bias: v[11],
            ff_out: v[12],
            ff_out_bias: v[13],
            ff_ln_gain: v[14],
            ff_ln_bias: v[15],
        }
    }
}

/// A model's weights bound into a graph, plus the static facts the forward
/// pass needs.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub embed_ln_gain: Var,
    pub embed_ln_bias: Var,
    pub layers: Vec<LayerVars>,
    pub qa_weight: Var,
    pub qa_bias: Var,
    /// Every bound var in [`Model::named_tensors`] order.
    pub all: Vec<Var>,
    pub head_dim: usize,
    pub activation: Activation,
    pub max_seq_len: usize,
}

impl Model {
    /// Copies the weights into `g` as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        self.bind_as(g, trainable)
    }

    /// [`Model::bind`] into a graph of any scalar type.
    pub fn bind_as<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> Result<ModelVars> {
        let all = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.cast())
                } else {
                    g.constant(t.cast())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars::from_vars(all, self))
    }
}

impl ModelVars {
    /// Wraps vars laid out in [`Model::named_tensors`] order.
    pub fn from_vars(all: Vec<Var>, model: &Model) -> Self {
        let n = model.layers.len();
        Self {
            token_embedding: all[0],
            position_embedding: all[1],
            embed_ln_gain: all[2],
            embed_ln_bias: all[3],
            layers: (0..n).map(|l| LayerVars::from_slice(&all[4 + 16 * l..4 + 16 * (l + 1)])).collect(),
            qa_weight: all[4 + 16 * n],
            qa_bias: all[5 + 16 * n],
            head_dim: model.head_dim(),
            activation: model.config.activation,
            max_seq_len: model.config.max_seq_len,
            all,
        }
    }
}

/// Per-layer gate vectors. `None` leaves the slice ungated.
#[derive(Clone, Debug)]
pub struct GateVars {
    pub attn: Vec<Option<Var>>,
    pub ff: Vec<Option<Var>>,
}

impl GateVars {
    pub fn none(n_layers: usize) -> Self {
        Self {
            attn: vec![None; n_layers],
            ff: vec![None; n_layers],
        }
    }
}

/// Span logits: `logits` is `[batch, seq, 2]`, `start`/`end` are `[batch, seq]`.
#[derive(Clone, Copy, Debug)]
pub struct SpanLogits {
    pub logits: Var,
    pub start: Var,
    pub end: Var,
}

fn linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Multi-head self-attention output before the residual connection.
/// Each head's context vectors are multiplied by its gate before the output
/// projection.
#[allow(clippy::too_many_arguments)]
pub fn attention_sublayer<T: Element>(
    g: &mut Graph<T>,
    lv: &LayerVars,
    x: Var,
    batch: usize,
    seq: usize,
    head_dim: usize,
    gate: Option<Var>,
    layer: usize,
) -> Result<Var> {
    let width = g.value(lv.query).shape()[1];
    let heads = width / head_dim;
    if let Some(gv) = gate {
        if g.value(gv).shape() != [heads] {
            return Err(Error::Shape {
                layer,
                detail: format!("attention gate has shape {:?}, layer has {heads} heads", g.value(gv).shape()),
            });
        }
    }
    let q = linear(g, x, lv.query, lv.query_bias)?;
    let k = linear(g, x, lv.key, lv.key_bias)?;
    let v = linear(g, x, lv.value, lv.value_bias)?;
    let q = g.split_heads(q, batch, seq, heads)?;
    let k = g.split_heads(k, batch, seq, heads)?;
    let v = g.split_heads(v, batch, seq, heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f32).sqrt())?;
    let probs = g.softmax(scores)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let mut ctx = g.merge_heads(ctx, batch)?;
    if let Some(gv) = gate {
        let expanded = g.repeat_each(gv, head_dim)?;
        ctx = g.mul(ctx, expanded)?;
    }
    linear(g, ctx, lv.attn_out, lv.attn_out_bias)
}

/// Feed-forward output before the residual connection; the gate multiplies
/// the post-activation intermediate values.
pub fn feed_forward_sublayer<T: Element>(
    g: &mut Graph<T>,
    lv: &LayerVars,
    x: Var,
    activation: Activation,
    gate: Option<Var>,
    layer: usize,
) -> Result<Var> {
    let units = g.value(lv.ff_in).shape()[1];
    if let Some(gv) = gate {
        if g.value(gv).shape() != [units] {
            return Err(Error::Shape {
                layer,
                detail: format!("ff gate has shape {:?}, layer has {units} units", g.value(gv).shape()),
            });
        }
    }
    let pre = linear(g, x, lv.ff_in, lv.ff_in_bias)?;
    let mut hidden = match activation {
        Activation::Relu => g.relu(pre)?,
        Activation::Gelu => g.gelu(pre)?,
    };
    if let Some(gv) = gate {
        hidden = g.mul(hidden, gv)?;
    }
    linear(g, hidden, lv.ff_out, lv.ff_out_bias)
}

/// Runs the encoder on `tokens` (`batch * seq` ids, row-major).
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    gates: &GateVars,
) -> Result<SpanLogits> {
    if tokens.len() != batch * seq || batch == 0 || seq == 0 {
        return Err(Error::Dimension {
            op: "forward",
            lhs: vec![tokens.len()],
            rhs: vec![batch, seq],
        });
    }
    if seq > mv.max_seq_len {
        return Err(Error::Index {
            op: "forward",
            index: seq,
            len: mv.max_seq_len,
        });
    }
    let n_layers = mv.layers.len();
    if gates.attn.len() != n_layers || gates.ff.len() != n_layers {
        return Err(Error::Shape {
            layer: gates.attn.len().min(gates.ff.len()),
            detail: format!("gates cover {}/{} layers, model has {n_layers}", gates.attn.len(), gates.ff.len()),
        });
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = g.gather(mv.token_embedding, tokens)?;
    let pos = g.gather(mv.position_embedding, &positions)?;
    let x = g.add(tok, pos)?;
    let mut x = g.layer_norm(x, mv.embed_ln_gain, mv.embed_ln_bias, LAYER_NORM_EPS)?;
    for (l, lv) in mv.layers.iter().enumerate() {
        let attn = attention_sublayer(g, lv, x, batch, seq, mv.head_dim, gates.attn[l], l)?;
        let h = g.add(x, attn)?;
        let h = g.layer_norm(h, lv.attn_ln_gain, lv.attn_ln_bias, LAYER_NORM_EPS)?;
        let ff = feed_forward_sublayer(g, lv, h, mv.activation, gates.ff[l], l)?;
        let y = g.add(h, ff)?;
        x = g.layer_norm(y, lv.ff_ln_gain, lv.ff_ln_bias, LAYER_NORM_EPS)?;
    }
    let flat = linear(g, x, mv.qa_weight, mv.qa_bias)?;
    let logits = g.reshape(flat, &[batch, seq, 2])?;
    let start = g.column(logits, 0)?;
    let end = g.column(logits, 1)?;
    Ok(SpanLogits { logits, start, end })
}

/// Mean over the batch of the averaged start and end cross-entropies.
pub fn qa_loss<T: Element>(g: &mut Graph<T>, logits: &SpanLogits, starts: &[usize], ends: &[usize]) -> Result<Var> {
    let s = g.cross_entropy(logits.start, starts)?;
    let e = g.cross_entropy(logits.end, ends)?;
    let both = g.add(s, e)?;
    g.scale(both, 0.5)
}

impl Model {
    /// Forward pass without gradient tracking; `gates` are per-layer
    /// `(attn, ff)` gate values. Returns `[batch, seq, 2]` logits.
    #[allow(clippy::type_complexity)]
    pub fn logits(
        &self,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        gates: Option<(&[Vec<f32>], &[Vec<f32>])>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false)?;
        let gv = match gates {
            None => GateVars::none(self.layers.len()),
            Some((attn, ff)) => {
                let bind = |g: &mut Graph, v: &[Vec<f32>]| -> Result<Vec<Option<Var>>> {
                    v.iter().map(|x| g.constant(Tensor::vector(x.clone())).map(Some)).collect()
                };
                GateVars {
                    attn: bind(&mut g, attn)?,
                    ff: bind(&mut g, ff)?,
                }
            }
        };
        let out = forward(&mut g, &mv, tokens, batch, seq, &gv)?;
        Ok(g.value(out.logits).clone())
    }
}
