//! Small trainable transformer encoder with bidirectional and causal
//! attention modes. Post-layer-norm residual arrangement, learned
//! absolute positional embeddings.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::BoundParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    /// Defaults to 4 * d_model when absent.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_mode")]
    pub attention_mode: AttentionMode,
}

fn default_d_model() -> usize {
    64
}
fn default_num_heads() -> usize {
    4
}
fn default_num_layers() -> usize {
    2
}
fn default_max_len() -> usize {
    128
}
fn default_mode() -> AttentionMode {
    AttentionMode::Bidirectional
}

pub const LN_EPS: f64 = 1e-5;

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: default_d_model(),
            num_heads: default_num_heads(),
            num_layers: default_num_layers(),
            ffn_dim: None,
            max_len: default_max_len(),
            attention_mode: default_mode(),
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.num_heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len must be at least 2, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Row-major n x n key mask: query q may attend key k iff k is a real
/// token (and, in causal mode, k <= q).
pub fn attention_mask_matrix(mask: &[bool], mode: AttentionMode) -> Vec<bool> {
    let n = mask.len();
    let mut out = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            out[q * n + k] = mask[k] && (mode == AttentionMode::Bidirectional || k <= q);
        }
    }
    out
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention probability matrices (n x n), for inspection.
    pub weights: Vec<Var>,
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var> {
    let wx = g.matmul(x, p.var(w)?)?;
    g.add_bias(wx, p.var(b)?)
}

/// Multi-head scaled dot-product self-attention over one sequence.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &[bool],
) -> Result<AttentionOutput> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask(
            "self_attention requires at least one unmasked position".into(),
        ));
    }
    let prefix = format!("encoder.{layer}.attn");
    let q = linear(g, p, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    // No key bias: shifting every key equally cancels inside the row
    // softmax, so the parameter would be permanently inert.
    let k = g.matmul(x, p.var(&format!("{prefix}.wk"))?)?;
    let v = linear(g, p, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let key_mask = Rc::new(attention_mask_matrix(mask, config.attention_mode));

    let mut mixes = Vec::with_capacity(config.num_heads);
    let mut weights = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scores = g.scale(raw, scale);
        let alpha = g.softmax_rows_masked(scores, Rc::clone(&key_mask))?;
        weights.push(alpha);
        mixes.push(g.matmul(alpha, vh)?);
    }
    let concat = g.concat_cols(&mixes)?;
    let output = linear(
        g,
        p,
        concat,
        &format!("{prefix}.wo"),
        &format!("{prefix}.bo"),
    )?;
    Ok(AttentionOutput { output, weights })
}

/// Post-layer-norm block: y = LN(x + Attn(x)); out = LN(y + FFN(y)).
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let attn = self_attention(g, p, config, layer, x, mask)?;
    let res1 = g.add(x, attn.output)?;
    let y = g.layer_norm(
        res1,
        p.var(&format!("encoder.{layer}.ln1.gamma"))?,
        p.var(&format!("encoder.{layer}.ln1.beta"))?,
        LN_EPS,
    )?;
    let h1 = linear(
        g,
        p,
        y,
        &format!("encoder.{layer}.ffn.w1"),
        &format!("encoder.{layer}.ffn.b1"),
    )?;
    let h1 = g.gelu(h1);
    let h2 = linear(
        g,
        p,
        h1,
        &format!("encoder.{layer}.ffn.w2"),
        &format!("encoder.{layer}.ffn.b2"),
    )?;
    let res2 = g.add(y, h2)?;
    g.layer_norm(
        res2,
        p.var(&format!("encoder.{layer}.ln2.gamma"))?,
        p.var(&format!("encoder.{layer}.ln2.beta"))?,
        LN_EPS,
    )
}

/// Token + positional embedding followed by `num_layers` transformer
/// blocks; returns the final-layer states (n x d_model).
pub fn encode_sequence<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
) -> Result<Var> {
    if ids.len() != mask.len() {
        return Err(Error::Shape(format!(
            "ids length {} differs from mask length {}",
            ids.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask(
            "encode_sequence requires at least one unmasked position".into(),
        ));
    }
    let mut states = g.embed(p.var("embed.token")?, p.var("embed.pos")?, ids)?;
    for layer in 0..config.num_layers {
        states = transformer_block(g, p, config, layer, states, mask)?;
    }
    Ok(states)
}

/// Which summary of the frozen causal encoder serves as the static
/// feature for a trainable head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Final-layer state at the last unmasked position.
    LastToken,
    /// Mask-aware mean of the final-layer states.
    Mean,
}

/// Final-layer feature from a frozen causal encoder. The caller binds the
/// encoder parameters as constants so no gradient reaches them.
pub fn extract_decoder_feature<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
    kind: FeatureKind,
) -> Result<Var> {
    if config.attention_mode != AttentionMode::Causal {
        return Err(Error::Config(
            "decoder feature extraction requires causal attention mode".into(),
        ));
    }
    let states = encode_sequence(g, p, config, ids, mask)?;
    match kind {
        FeatureKind::LastToken => {
            let last = mask
                .iter()
                .rposition(|&m| m)
                .ok_or_else(|| Error::DegenerateMask("empty sequence".into()))?;
            g.slice_rows(states, last, 1)
        }
        FeatureKind::Mean => g.mean_pool(states, Rc::new(mask.to_vec())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::with_vocab(10);
        assert!(c.validate().is_ok());
        assert_eq!(c.ffn_dim(), 256);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_matrix_modes() {
        let mask = [true, true, false];
        let bi = attention_mask_matrix(&mask, AttentionMode::Bidirectional);
        assert_eq!(bi, vec![true, true, false, true, true, false, true, true, false]);
        let causal = attention_mask_matrix(&mask, AttentionMode::Causal);
        assert_eq!(
            causal,
            vec![true, false, false, true, true, false, true, true, false]
        );
    }
}
