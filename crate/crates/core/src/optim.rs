//! AdamW with decoupled weight decay, layer-wise learning-rate decay
//! groups, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Params};
use crate::scalar::{cast, Scalar};

/// Linear warmup to `base_lr`, then cosine decay to zero.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Parameters sharing one learning-rate multiplier and decay setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub lr_multiplier: f64,
    pub weight_decay: bool,
}

/// Learning-rate multiplier by depth: head and pooling stay at 1, encoder
/// layer l (0 = bottom) gets decay^(L-l), embeddings decay^(L+1).
pub fn llrd_multiplier(name: &str, num_layers: usize, decay: f64) -> f64 {
    if let Some(rest) = name.strip_prefix("encoder.") {
        let layer: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("encoder parameter names carry their layer index");
        decay.powi((num_layers - layer) as i32)
    } else if name.starts_with("embed.") {
        decay.powi(num_layers as i32 + 1)
    } else {
        1.0
    }
}

/// Group every trainable parameter by (multiplier, decay flag). Biases
/// and LayerNorm parameters (rank-1 tensors) are excluded from weight
/// decay.
pub fn build_llrd_groups<T: Scalar>(model: &Model<T>, decay: f64) -> Vec<ParamGroup> {
    let layers = model.config.encoder.num_layers;
    let mut groups: Vec<ParamGroup> = Vec::new();
    for (name, tensor) in model.params.iter() {
        let multiplier = llrd_multiplier(name, layers, decay);
        let decayed = tensor.shape().len() >= 2;
        match groups
            .iter_mut()
            .find(|g| g.lr_multiplier == multiplier && g.weight_decay == decayed)
        {
            Some(group) => group.names.push(name.to_string()),
            None => groups.push(ParamGroup {
                names: vec![name.to_string()],
                lr_multiplier: multiplier,
                weight_decay: decayed,
            }),
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers aligned with the parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let m = (0..params.len())
            .map(|i| vec![T::zero(); params.rc(i).numel()])
            .collect();
        let v = (0..params.len())
            .map(|i| vec![T::zero(); params.rc(i).numel()])
            .collect();
        OptimizerState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update over all parameters that received a gradient.
///
///   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
///   w -= lr * (mhat / (sqrt(vhat) + eps) + wd*w)
///
/// `grads` and `lrs` align with the parameter order; `decay_enabled`
/// marks the groups subject to weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimizerState<T>,
    lrs: &[f64],
    decay_enabled: &[bool],
    config: &AdamWConfig,
) -> Result<()> {
    state.t += 1;
    let b1: T = cast(config.beta1);
    let b2: T = cast(config.beta2);
    let eps: T = cast(config.eps);
    let one = T::one();
    let corr1 = one - b1.powi(state.t as i32);
    let corr2 = one - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let Some(grad) = grads[i].as_deref() else {
            continue;
        };
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} in parameter '{}'",
                params.name(i)
            )));
        }
        let lr: T = cast(lrs[i]);
        let wd: T = if decay_enabled[i] {
            cast(config.weight_decay)
        } else {
            T::zero()
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = params.tensor_mut(i).data_mut();
        for ((w, &g), (m, v)) in data.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / corr1;
            let vhat = *v / corr2;
            *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AttentionMode, EncoderConfig};
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::pooling::PoolingMode;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn one_param(value: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("w", Tensor::from_rows(&[vec![value]]).unwrap());
        p
    }

    fn step_once(
        params: &mut Params<f64>,
        state: &mut OptimizerState<f64>,
        grad: f64,
        lr: f64,
        wd: f64,
        decay: bool,
    ) {
        let config = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        adamw_step(
            params,
            &[Some(vec![grad])],
            state,
            &[lr],
            &[decay],
            &config,
        )
        .unwrap();
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = one_param(1.25);
        let mut state = OptimizerState::new(&params);
        step_once(&mut params, &mut state, 0.0, 0.1, 0.0, false);
        assert_eq!(params.rc(0).data(), &[1.25]);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut params = one_param(1.0);
        let mut state = OptimizerState::new(&params);
        step_once(&mut params, &mut state, 0.0, 0.1, 0.01, true);
        assert_abs_diff_eq!(params.rc(0).data()[0], 0.999, epsilon = 1e-15);
    }

    #[test]
    fn first_step_hand_value() {
        // w=1, g=1, lr=0.1: mhat=1, vhat=1, w -> 1 - 0.1/(1+1e-8).
        let mut params = one_param(1.0);
        let mut state = OptimizerState::new(&params);
        step_once(&mut params, &mut state, 1.0, 0.1, 0.0, false);
        assert_abs_diff_eq!(params.rc(0).data()[0], 0.9, epsilon = 1e-8);
        assert_abs_diff_eq!(params.rc(0).data()[0], 0.9000000009999999, epsilon = 1e-12);
    }

    #[test]
    fn five_step_quadratic_trajectory_matches_reference() {
        // f(w) = w^2 from w=1, lr=0.1; frozen against an independent
        // evaluation of the update formulas.
        let expected = [
            0.9000000005,
            0.8004122286917928,
            0.7015862729460303,
            0.603939060573746,
            0.507963659264342,
        ];
        let mut params = one_param(1.0);
        let mut state = OptimizerState::new(&params);
        for want in expected {
            let w = params.rc(0).data()[0];
            step_once(&mut params, &mut state, 2.0 * w, 0.1, 0.0, false);
            assert_abs_diff_eq!(params.rc(0).data()[0], want, epsilon = 1e-12);
        }
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = one_param(1.0);
        let mut state = OptimizerState::new(&params);
        let err = adamw_step(
            &mut params,
            &[Some(vec![f64::NAN])],
            &mut state,
            &[0.1],
            &[false],
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
    }

    #[test]
    fn cosine_boundaries() {
        // Warmup start, warmup end, decay midpoint, final step.
        assert_abs_diff_eq!(cosine_lr(0, 100, 10, 1.0).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(10, 100, 10, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(55, 100, 10, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_lr(100, 100, 10, 1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert!(cosine_lr(0, 0, 0, 1.0).is_err());
        assert!(cosine_lr(5, 10, 10, 1.0).is_err());
    }

    fn tiny_model(layers: usize) -> Model<f64> {
        Model::init(
            ModelConfig {
                encoder: EncoderConfig {
                    vocab_size: 6,
                    d_model: 8,
                    num_heads: 2,
                    num_layers: layers,
                    ffn_dim: None,
                    max_len: 8,
                    attention_mode: AttentionMode::Bidirectional,
                },
                pooling: PoolingMode::Hybrid,
                head: HeadConfig::with_classes(3),
                feature_extraction: None,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn llrd_multipliers_frozen_case() {
        // L=2, decay 0.95: head 1.0, top 0.95, bottom 0.9025,
        // embeddings 0.857375.
        let model = tiny_model(2);
        assert_abs_diff_eq!(llrd_multiplier("head.dense.w", 2, 0.95), 1.0);
        assert_abs_diff_eq!(llrd_multiplier("pool.attn.w", 2, 0.95), 1.0);
        assert_abs_diff_eq!(
            llrd_multiplier("encoder.1.attn.wq", 2, 0.95),
            0.95,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            llrd_multiplier("encoder.0.ffn.w1", 2, 0.95),
            0.9025,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            llrd_multiplier("embed.token", 2, 0.95),
            0.857375,
            epsilon = 1e-15
        );
        // Twelve layers: embeddings at base 2e-5 land near 1.0267e-5.
        assert_abs_diff_eq!(
            2e-5 * llrd_multiplier("embed.pos", 12, 0.95),
            1.0266841665590102e-5,
            epsilon = 1e-18
        );
        // Every parameter lands in exactly one group.
        let groups = build_llrd_groups(&model, 0.95);
        let mut covered: Vec<&String> = groups.iter().flat_map(|g| &g.names).collect();
        covered.sort();
        assert_eq!(covered.len(), model.params.len());
        covered.dedup();
        assert_eq!(covered.len(), model.params.len());
    }

    #[test]
    fn llrd_decay_one_collapses_to_uniform() {
        let model = tiny_model(2);
        for g in build_llrd_groups(&model, 1.0) {
            assert_eq!(g.lr_multiplier, 1.0);
        }
    }

    #[test]
    fn llrd_monotone_from_head_to_embeddings() {
        let decay = 0.9;
        let layers = 4;
        let head = llrd_multiplier("head.classify.w", layers, decay);
        let mut last = head;
        for l in (0..layers).rev() {
            let m = llrd_multiplier(&format!("encoder.{l}.attn.wq"), layers, decay);
            assert!(m <= last);
            last = m;
        }
        assert!(llrd_multiplier("embed.token", layers, decay) <= last);
    }

    #[test]
    fn llrd_excludes_rank_one_tensors_from_decay() {
        let model = tiny_model(1);
        for g in build_llrd_groups(&model, 0.95) {
            for name in &g.names {
                let rank = model.params.get(name).unwrap().shape().len();
                assert_eq!(g.weight_decay, rank >= 2, "{name}");
            }
        }
    }
}
