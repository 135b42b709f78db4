//! End-to-end fine-tuning: dynamic batches, label-smoothed CE, AdamW with
//! LLRD multipliers under a warmup+cosine schedule, per-epoch dev
//! evaluation, and best-checkpoint retention.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::batching::make_batches;
use crate::checkpoint::Checkpoint;
use crate::data::{build_vocab, encode_dataset, Encoded, Example, LabelMap};
use crate::encoder::{AttentionMode, EncoderConfig, FeatureKind};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::HeadConfig;
use crate::model::{BindMode, Model, ModelConfig};
use crate::objectives::{LossConfig, MetricsReport};
use crate::optim::{adamw_step, build_llrd_groups, cosine_lr, AdamWConfig, OptimizerState};
use crate::pooling::PoolingMode;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder hyperparameters as they appear in config files; the
/// vocabulary size is filled in after the vocab is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSettings {
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_layers")]
    pub num_layers: usize,
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_mode")]
    pub attention_mode: AttentionMode,
}

fn d_d_model() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_layers() -> usize {
    2
}
fn d_max_len() -> usize {
    128
}
fn d_mode() -> AttentionMode {
    AttentionMode::Bidirectional
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            d_model: d_d_model(),
            num_heads: d_heads(),
            num_layers: d_layers(),
            ffn_dim: None,
            max_len: d_max_len(),
            attention_mode: d_mode(),
        }
    }
}

impl EncoderSettings {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            attention_mode: self.attention_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSettings {
    #[serde(default = "d_paths")]
    pub num_paths: usize,
    #[serde(default = "d_rates")]
    pub dropout_rates: Vec<f64>,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

fn d_paths() -> usize {
    5
}
fn d_rates() -> Vec<f64> {
    vec![0.10, 0.15, 0.20, 0.25, 0.30]
}

impl Default for HeadSettings {
    fn default() -> Self {
        HeadSettings {
            num_paths: d_paths(),
            dropout_rates: d_rates(),
            hidden_dim: None,
        }
    }
}

impl HeadSettings {
    pub fn to_config(&self, num_classes: usize) -> HeadConfig {
        HeadConfig {
            num_paths: self.num_paths,
            dropout_rates: self.dropout_rates.clone(),
            hidden_dim: self.hidden_dim,
            num_classes,
        }
    }
}

/// All training hyperparameters. The desk-scale from-scratch default
/// learning rate is 3e-4; 2e-5 is the conventional value when
/// fine-tuning a large pretrained encoder and can be set in config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_llrd")]
    pub llrd_decay: f64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// None selects 10% of total steps; Some(0) disables warmup.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_pooling")]
    pub pooling: PoolingMode,
    #[serde(default = "d_max_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub head: HeadSettings,
    /// Frozen causal feature-extraction arm instead of fine-tuning.
    #[serde(default)]
    pub feature_extraction: Option<FeatureKind>,
}

fn d_base_lr() -> f64 {
    3e-4
}
fn d_llrd() -> f64 {
    0.95
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    32
}
fn d_wd() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_seed() -> u64 {
    42
}
fn d_pooling() -> PoolingMode {
    PoolingMode::Hybrid
}
fn d_max_vocab() -> usize {
    5000
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 {
            return Err(Error::Config("base_lr must be non-negative".into()));
        }
        if !(self.llrd_decay > 0.0 && self.llrd_decay <= 1.0) {
            return Err(Error::Config(format!(
                "llrd_decay must be in (0, 1], got {}",
                self.llrd_decay
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            epsilon: self.label_smoothing,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.to_config(vocab_size),
            pooling: self.pooling,
            head: self.head.to_config(num_classes),
            feature_extraction: self.feature_extraction,
        }
    }
}

/// One line of the training history (serialized as JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    pub lr_last: f64,
}

pub struct TrainOutcome<T: Scalar> {
    /// Best dev-macro-F1 state (initialization when epochs = 0).
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochStats>,
}

/// Train on pre-labeled examples. The vocabulary is built from the
/// training texts; the dev set drives best-checkpoint retention.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &[Example],
    dev_set: &[Example],
    label_map: &LabelMap,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dev_set.is_empty() {
        return Err(Error::Data("dev set is empty".into()));
    }
    let classes = label_map.len();
    for ex in train_set.iter().chain(dev_set) {
        if ex.label_id >= classes {
            return Err(Error::Data(format!(
                "label id {} outside the {classes}-class label map",
                ex.label_id
            )));
        }
    }

    let vocab = build_vocab(train_set.iter().map(|e| e.text.as_str()), config.max_vocab)?;
    let train_enc = encode_dataset(train_set, &vocab, config.encoder.max_len)?;
    let dev_enc = encode_dataset(dev_set, &vocab, config.encoder.max_len)?;

    let mut model: Model<T> = Model::init(config.model_config(vocab.len(), classes), config.seed)?;
    let mut rng = RngState::new(config.seed);

    // Static features are extracted once when the encoder is frozen.
    let features: Option<Vec<Rc<Tensor<T>>>> = match config.feature_extraction {
        Some(_) => Some(
            train_enc
                .iter()
                .map(|e| {
                    let mask = vec![true; e.ids.len()];
                    model.extract_feature(&e.ids, &mask).map(Rc::new)
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let steps_per_epoch = train_enc.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = config.warmup_steps.unwrap_or(total_steps / 10);

    let groups = build_llrd_groups(&model, config.llrd_decay);
    let mut multipliers = vec![1.0f64; model.params.len()];
    let mut decay_enabled = vec![false; model.params.len()];
    for (i, (name, _)) in model.params.iter().enumerate() {
        for g in &groups {
            if g.names.iter().any(|n| n == name) {
                multipliers[i] = g.lr_multiplier;
                decay_enabled[i] = g.weight_decay;
            }
        }
    }

    let mut opt = OptimizerState::new(&model.params);
    let adamw = config.adamw();
    let loss_config = config.loss();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    let mut step = 0usize;
    let mut lr_last = 0.0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;

        for chunk in order.chunks(config.batch_size) {
            let mut g: Graph<T> = Graph::new();
            let bound = model.bind(&mut g, BindMode::Trainable);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let ex = &train_enc[idx];
                let logits = match &features {
                    Some(cache) => model.forward_feature_logits(
                        &mut g,
                        &bound,
                        Rc::clone(&cache[idx]),
                        true,
                        &mut rng,
                    )?,
                    None => {
                        let mask = vec![true; ex.ids.len()];
                        model.forward_logits(&mut g, &bound, &ex.ids, &mask, true, &mut rng)?
                    }
                };
                losses.push(g.label_smoothed_ce(logits, ex.label, loss_config.epsilon)?);
            }
            let total = g.addn(&losses)?;
            let batch_loss = g.scale(total, 1.0 / chunk.len() as f64);
            let loss_value = g.value(batch_loss).item().to_f64().unwrap();
            let mut grads = g.backward(batch_loss).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("training diverged at step {step}: {msg}"))
                }
                other => other,
            })?;

            let lr = cosine_lr(step, total_steps, warmup, config.base_lr)?;
            let grad_vec: Vec<Option<Vec<T>>> = (0..model.params.len())
                .map(|i| {
                    bound
                        .var(model.params.name(i))
                        .ok()
                        .and_then(|v| grads.take(v))
                })
                .collect();
            drop(grads);
            drop(g);
            let lrs: Vec<f64> = multipliers.iter().map(|m| m * lr).collect();
            adamw_step(&mut model.params, &grad_vec, &mut opt, &lrs, &decay_enabled, &adamw)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("training diverged at step {step}: {msg}"))
                    }
                    other => other,
                })?;

            loss_sum += loss_value * chunk.len() as f64;
            lr_last = lr;
            step += 1;
        }

        let report = evaluate_encoded(&model, &dev_enc)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_enc.len() as f64,
            dev_accuracy: report.accuracy,
            dev_macro_f1: report.macro_f1,
            lr_last,
        };
        if best.as_ref().is_none_or(|(b, _)| stats.dev_macro_f1 > *b) {
            best = Some((
                stats.dev_macro_f1,
                Checkpoint {
                    model: model.snapshot(),
                    vocab: vocab.clone(),
                    label_map: label_map.clone(),
                    train_config: config.clone(),
                    step: step as u64,
                },
            ));
        }
        history.push(stats);
    }

    let checkpoint = match best {
        Some((_, ckpt)) => ckpt,
        None => Checkpoint {
            model,
            vocab,
            label_map: label_map.clone(),
            train_config: config.clone(),
            step: 0,
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

/// Eval-mode predictions for already-encoded examples.
pub fn predict_encoded<T: Scalar>(model: &Model<T>, dataset: &[Encoded]) -> Result<Vec<usize>> {
    dataset
        .iter()
        .map(|e| {
            let mask = vec![true; e.ids.len()];
            model.predict(&e.ids, &mask)
        })
        .collect()
}

pub fn evaluate_encoded<T: Scalar>(
    model: &Model<T>,
    dataset: &[Encoded],
) -> Result<MetricsReport> {
    let preds = predict_encoded(model, dataset)?;
    let golds: Vec<usize> = dataset.iter().map(|e| e.label).collect();
    MetricsReport::compute(&preds, &golds, model.config.head.num_classes)
}

/// Deterministic eval-mode metrics for raw examples against a checkpoint.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, dataset: &[Example]) -> Result<MetricsReport> {
    let encoded = encode_checkpoint_dataset(ckpt, dataset)?;
    evaluate_encoded(&ckpt.model, &encoded)
}

/// Encode a dataset with a checkpoint's vocabulary, verifying that the
/// checkpoint's label map covers every label.
pub fn encode_checkpoint_dataset<T: Scalar>(
    ckpt: &Checkpoint<T>,
    dataset: &[Example],
) -> Result<Vec<Encoded>> {
    let classes = ckpt.label_map.len();
    for ex in dataset {
        if ex.label_id >= classes {
            return Err(Error::Checkpoint(format!(
                "dataset label id {} not covered by the checkpoint's {classes}-class label map",
                ex.label_id
            )));
        }
    }
    encode_dataset(dataset, &ckpt.vocab, ckpt.model.config.encoder.max_len)
}

/// Deterministic shuffled dynamic batches for one epoch, exposed for
/// consumers that batch outside the train loop.
pub fn epoch_batches(
    examples: &[Encoded],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<crate::batching::Batch>> {
    make_batches(examples, batch_size, true, rng)
}

/// Paired dev reports from the two experiment arms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    /// Fine-tuned bidirectional encoder with hybrid pooling.
    pub fine_tuned: MetricsReport,
    /// Frozen causal encoder, last-token static feature, trainable head.
    pub frozen_causal: MetricsReport,
    pub delta_macro_f1: f64,
}

/// Train both arms on identical data, seed, and epoch budget, and
/// evaluate each arm's best checkpoint on the dev set.
pub fn compare_arms<T: Scalar>(
    base: &TrainConfig,
    train_set: &[Example],
    dev_set: &[Example],
    label_map: &LabelMap,
) -> Result<CompareReport> {
    let mut tuned_cfg = base.clone();
    tuned_cfg.encoder.attention_mode = AttentionMode::Bidirectional;
    tuned_cfg.pooling = PoolingMode::Hybrid;
    tuned_cfg.feature_extraction = None;

    let mut frozen_cfg = base.clone();
    frozen_cfg.encoder.attention_mode = AttentionMode::Causal;
    frozen_cfg.feature_extraction = Some(FeatureKind::LastToken);

    let tuned = train::<T>(&tuned_cfg, train_set, dev_set, label_map)?;
    let frozen = train::<T>(&frozen_cfg, train_set, dev_set, label_map)?;
    let fine_tuned = evaluate(&tuned.checkpoint, dev_set)?;
    let frozen_causal = evaluate(&frozen.checkpoint, dev_set)?;
    Ok(CompareReport {
        delta_macro_f1: fine_tuned.macro_f1 - frozen_causal.macro_f1,
        fine_tuned,
        frozen_causal,
    })
}
