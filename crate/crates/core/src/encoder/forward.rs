//! Batched encoder forward pass producing CLS vectors, graph-recorded so the
//! same path serves training and inference.

use std::collections::BTreeMap;

use super::{EncoderConfig, EncoderError, EncoderWeights};
use crate::corpus::TokenSequence;
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-12;

/// Leaf variables for one encoder's weights inside a [`Graph`].
pub struct EncoderVars {
    vars: BTreeMap<String, Var>,
}

impl EncoderVars {
    /// Registers every weight tensor as a graph leaf. `trainable` decides
    /// per key whether gradients flow to it.
    pub fn register<E: Scalar>(
        g: &mut Graph<E>,
        weights: &EncoderWeights<E>,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Self {
        let vars = weights
            .tensors()
            .iter()
            .map(|(key, t)| (key.clone(), g.leaf(t.clone(), trainable(key))))
            .collect();
        EncoderVars { vars }
    }

    /// Wraps an existing key-to-leaf mapping (keys unprefixed, per schema).
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        EncoderVars { vars }
    }

    pub fn var(&self, key: &str) -> Var {
        self.vars[key]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Runs the encoder over a fixed-length batch and returns the `batch x H`
/// matrix of final-layer hidden states at position 0 (the CLS token).
pub fn forward_cls<E: Scalar>(
    g: &mut Graph<E>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    batch: &[TokenSequence],
) -> Result<Var, EncoderError> {
    let hidden = forward_hidden(g, vars, cfg, batch)?;
    let t = batch[0].len();
    let cls_rows: Vec<u32> = (0..batch.len() as u32).map(|i| i * t as u32).collect();
    Ok(g.gather_rows(hidden, &cls_rows)?)
}

/// Full final-layer hidden states, `(batch * seq_len) x H`.
pub fn forward_hidden<E: Scalar>(
    g: &mut Graph<E>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    batch: &[TokenSequence],
) -> Result<Var, EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::InvalidConfig("empty batch".into()));
    }
    let t = batch[0].len();
    for seq in batch {
        if seq.len() != t {
            return Err(EncoderError::InvalidConfig(format!(
                "mixed sequence lengths {t} and {} in one batch",
                seq.len()
            )));
        }
    }
    if t > cfg.max_positions {
        return Err(EncoderError::InvalidConfig(format!(
            "sequence length {t} exceeds max positions {}",
            cfg.max_positions
        )));
    }
    let b = batch.len();
    let heads = cfg.heads;

    let flat_ids: Vec<u32> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
    let segments: Vec<u32> = vec![0; b * t];
    // key-padding masks: true marks a position attention must not see
    let pad_masks: Vec<Vec<bool>> =
        batch.iter().map(|s| s.attention_mask.iter().map(|&m| !m).collect()).collect();

    let tok = g.gather_rows(vars.var("emb.tok"), &flat_ids)?;
    let pos = g.gather_rows(vars.var("emb.pos"), &positions)?;
    let seg = g.gather_rows(vars.var("emb.seg"), &segments)?;
    let sum = g.add(tok, pos)?;
    let sum = g.add(sum, seg)?;
    let mut x = g.layer_norm(sum, vars.var("emb.ln.g"), vars.var("emb.ln.b"), LN_EPS)?;

    for layer in 0..cfg.num_layers {
        let key = |part: &str| format!("layer.{layer}.{part}");
        let proj = |g: &mut Graph<E>, x: Var, part: &str| -> Result<Var, EncoderError> {
            let m = g.matmul(x, vars.var(&key(&format!("attn.{part}.w"))))?;
            Ok(g.add_row_broadcast(m, vars.var(&key(&format!("attn.{part}.b"))))?)
        };
        let q = proj(g, x, "q")?;
        let k = proj(g, x, "k")?;
        let v = proj(g, x, "v")?;
        let ctx = g.multi_head_attention(q, k, v, heads, t, &pad_masks)?;
        let attn_out = g.matmul(ctx, vars.var(&key("attn.o.w")))?;
        let attn_out = g.add_row_broadcast(attn_out, vars.var(&key("attn.o.b")))?;
        let res = g.add(x, attn_out)?;
        x = g.layer_norm(res, vars.var(&key("ln1.g")), vars.var(&key("ln1.b")), LN_EPS)?;

        let ff = g.matmul(x, vars.var(&key("ff.w1")))?;
        let ff = g.add_row_broadcast(ff, vars.var(&key("ff.b1")))?;
        let ff = g.gelu(ff)?;
        let ff = g.matmul(ff, vars.var(&key("ff.w2")))?;
        let ff = g.add_row_broadcast(ff, vars.var(&key("ff.b2")))?;
        let res = g.add(x, ff)?;
        x = g.layer_norm(res, vars.var(&key("ln2.g")), vars.var(&key("ln2.b")), LN_EPS)?;
    }

    Ok(x)
}

/// Inference-only encode: no gradients, returns the CLS matrix by value.
pub fn encode<E: Scalar>(
    weights: &EncoderWeights<E>,
    batch: &[TokenSequence],
) -> Result<Tensor<E>, EncoderError> {
    let mut g = Graph::no_grad();
    let vars = EncoderVars::register(&mut g, weights, &|_| false);
    let cls = forward_cls(&mut g, &vars, weights.config(), batch)?;
    Ok(g.value(cls).clone())
}
