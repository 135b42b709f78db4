//! Named parameter registry and the end-to-end classifier model.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AttentionMode, EncoderConfig, FeatureKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{head_forward, HeadConfig};
use crate::pooling::{pool, PoolingMode};
use crate::rng::RngState;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Ordered name -> tensor registry. Insertion order is the canonical
/// parameter order used by the optimizer and the checkpoint format.
#[derive(Debug, Clone)]
pub struct Params<T: Scalar> {
    entries: Vec<(String, Rc<Tensor<T>>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        tensor.set_requires_grad(true);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), Rc::new(tensor)));
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Tensor<T>>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Mutable access for the optimizer; panics if a graph still shares
    /// the tensor.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Rc::get_mut(&mut self.entries[i].1).expect("no outstanding graph references")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn rc(&self, i: usize) -> &Rc<Tensor<T>> {
        &self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rc<Tensor<T>>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Replace a parameter's storage; the shape must match.
    pub fn set_tensor(&mut self, name: &str, mut tensor: Tensor<T>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if tensor.shape() != self.entries[i].1.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape {:?} does not match expected {:?}",
                tensor.shape(),
                self.entries[i].1.shape()
            )));
        }
        tensor.set_requires_grad(true);
        self.entries[i].1 = Rc::new(tensor);
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy with fresh storage, so the original can keep being updated
    /// in place without write conflicts on shared buffers.
    pub fn deep_clone(&self) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Rc::new((**t).clone())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter vars bound into one graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: HashMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters become graph leaves that receive gradients
    /// (except the encoder when the model runs in feature-extraction
    /// mode, which stays frozen).
    Trainable,
    /// Everything is a constant; used for evaluation.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingMode,
    pub head: HeadConfig,
    /// When set, the encoder is frozen and the head trains on the
    /// extracted static feature (requires causal attention mode).
    #[serde(default)]
    pub feature_extraction: Option<FeatureKind>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.feature_extraction.is_some()
            && self.encoder.attention_mode != AttentionMode::Causal
        {
            return Err(Error::Config(
                "feature extraction requires a causal encoder".into(),
            ));
        }
        Ok(())
    }

    /// Width of the vector entering the head.
    pub fn head_input_dim(&self) -> usize {
        if self.feature_extraction.is_some() {
            self.encoder.d_model
        } else {
            self.pooling.output_dim(self.encoder.d_model)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> Model<T> {
    /// BERT-style init: N(0, 0.02) matrices, zero biases, unit/zero
    /// layer norm.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    /// Init with a chosen weight scale. Gradient checking uses a larger
    /// scale than training so no gradient sits at the finite-difference
    /// noise floor.
    pub fn init_with_std(mut config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.head.hidden_dim = Some(
            config
                .head
                .hidden_dim
                .unwrap_or(config.encoder.d_model),
        );
        config.validate()?;
        let mut rng = RngState::new(seed);
        let mut params = Params::new();
        let normal = |shape: &[usize], rng: &mut RngState| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| cast::<T>(rng.next_normal() * std)).collect(),
            )
            .expect("shape matches data")
        };

        let d = config.encoder.d_model;
        let f = config.encoder.ffn_dim();
        params.insert("embed.token", normal(&[config.encoder.vocab_size, d], &mut rng));
        params.insert("embed.pos", normal(&[config.encoder.max_len, d], &mut rng));
        for l in 0..config.encoder.num_layers {
            for part in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("encoder.{l}.attn.{part}"), normal(&[d, d], &mut rng));
            }
            for part in ["bq", "bv", "bo"] {
                params.insert(&format!("encoder.{l}.attn.{part}"), Tensor::zeros(&[d]));
            }
            params.insert(&format!("encoder.{l}.ln1.gamma"), Tensor::ones(&[d]));
            params.insert(&format!("encoder.{l}.ln1.beta"), Tensor::zeros(&[d]));
            params.insert(&format!("encoder.{l}.ffn.w1"), normal(&[d, f], &mut rng));
            params.insert(&format!("encoder.{l}.ffn.b1"), Tensor::zeros(&[f]));
            params.insert(&format!("encoder.{l}.ffn.w2"), normal(&[f, d], &mut rng));
            params.insert(&format!("encoder.{l}.ffn.b2"), Tensor::zeros(&[d]));
            params.insert(&format!("encoder.{l}.ln2.gamma"), Tensor::ones(&[d]));
            params.insert(&format!("encoder.{l}.ln2.beta"), Tensor::zeros(&[d]));
        }
        if config.pooling.uses_attention() && config.feature_extraction.is_none() {
            params.insert("pool.attn.w", normal(&[d, 1], &mut rng));
        }
        let head_in = config.head_input_dim();
        let hidden = config.head.hidden_dim.expect("resolved above");
        params.insert("head.dense.w", normal(&[head_in, hidden], &mut rng));
        params.insert("head.dense.b", Tensor::zeros(&[hidden]));
        params.insert("head.ln.gamma", Tensor::ones(&[hidden]));
        params.insert("head.ln.beta", Tensor::zeros(&[hidden]));
        params.insert(
            "head.classify.w",
            normal(&[hidden, config.head.num_classes], &mut rng),
        );
        params.insert("head.classify.b", Tensor::zeros(&[config.head.num_classes]));

        Ok(Model { config, params })
    }

    /// Independent copy whose tensors do not share storage with `self`.
    pub fn snapshot(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.deep_clone(),
        }
    }

    /// Whether gradients should flow into this parameter during training.
    pub fn param_trainable(&self, name: &str) -> bool {
        self.config.feature_extraction.is_none() || name.starts_with("head.")
    }

    pub fn bind(&self, g: &mut Graph<T>, mode: BindMode) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.params.len());
        for (name, tensor) in self.params.iter() {
            let trainable = mode == BindMode::Trainable && self.param_trainable(name);
            let var = if trainable {
                g.param(Rc::clone(tensor))
            } else {
                g.constant_rc(Rc::clone(tensor))
            };
            vars.insert(name.to_string(), var);
        }
        BoundParams { vars }
    }

    /// Logits (1 x C) for one sequence.
    pub fn forward_logits(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        ids: &[usize],
        mask: &[bool],
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        let pooled = match self.config.feature_extraction {
            Some(kind) => encoder::extract_decoder_feature(
                g,
                bound,
                &self.config.encoder,
                ids,
                mask,
                kind,
            )?,
            None => {
                let states = encoder::encode_sequence(g, bound, &self.config.encoder, ids, mask)?;
                pool(g, bound, self.config.pooling, states, mask)?.h_pooled
            }
        };
        head_forward(g, bound, &self.config.head, pooled, training, rng)
    }

    /// Head logits over a precomputed static feature.
    pub fn forward_feature_logits(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        feature: Rc<Tensor<T>>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        let fv = g.constant_rc(feature);
        head_forward(g, bound, &self.config.head, fv, training, rng)
    }

    /// Static feature tensor from the frozen causal encoder.
    pub fn extract_feature(&self, ids: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
        let kind = self.config.feature_extraction.ok_or_else(|| {
            Error::Config("model is not configured for feature extraction".into())
        })?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, BindMode::Frozen);
        let feature =
            encoder::extract_decoder_feature(&mut g, &bound, &self.config.encoder, ids, mask, kind)?;
        Ok(g.value(feature).clone())
    }

    /// Deterministic eval-mode logits as f64.
    pub fn predict_logits(&self, ids: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, BindMode::Frozen);
        let mut rng = RngState::new(0);
        let logits = self.forward_logits(&mut g, &bound, ids, mask, false, &mut rng)?;
        Ok(g.value(logits)
            .data()
            .iter()
            .map(|x| x.to_f64().expect("logit fits f64"))
            .collect())
    }

    /// Argmax class, ties broken toward the lower id.
    pub fn predict(&self, ids: &[usize], mask: &[bool]) -> Result<usize> {
        let logits = self.predict_logits(ids, mask)?;
        Ok(argmax(&logits))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
