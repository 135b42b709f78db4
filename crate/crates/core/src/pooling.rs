//! Sequence pooling: CLS, mask-aware mean, learned attention, and the
//! hybrid concatenation h_pooled = [h_mean ; h_attn].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::BoundParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Cls,
    Mean,
    Attn,
    Hybrid,
}

impl PoolingMode {
    /// Width of the pooled vector: hybrid doubles the hidden size.
    pub fn output_dim(&self, d_model: usize) -> usize {
        match self {
            PoolingMode::Hybrid => 2 * d_model,
            _ => d_model,
        }
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, PoolingMode::Attn | PoolingMode::Hybrid)
    }
}

/// Pooled vectors for one sequence; `h_pooled` is what feeds the head.
pub struct PooledFeatures {
    pub h_mean: Option<Var>,
    pub h_attn: Option<Var>,
    pub h_pooled: Var,
}

/// The state at position 0.
pub fn cls_pool<T: Scalar>(g: &mut Graph<T>, states: Var) -> Result<Var> {
    g.slice_rows(states, 0, 1)
}

/// Mask-aware mean over token states.
pub fn mean_pool<T: Scalar>(g: &mut Graph<T>, states: Var, mask: &[bool]) -> Result<Var> {
    g.mean_pool(states, Rc::new(mask.to_vec()))
}

/// Learned attention pooling: scores = states . w + b, alpha =
/// masked softmax, h = sum alpha_t * states_t. Differentiable in w, b,
/// and the states.
pub fn attention_pool<T: Scalar>(
    g: &mut Graph<T>,
    states: Var,
    mask: &[bool],
    w: Var,
    b: Var,
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask(
            "attention_pool requires at least one unmasked position".into(),
        ));
    }
    let raw = g.matmul(states, w)?; // n x 1
    let scored = g.add_bias(raw, b)?;
    let row = g.transpose(scored)?; // 1 x n
    let mask_rc = Rc::new(mask.to_vec());
    let alpha = g.softmax_masked(row, Rc::clone(&mask_rc))?;
    g.weighted_pool(states, alpha, mask_rc)
}

// The scorer bias shifts every score equally and cancels inside the
// masked softmax, so the model pins it at zero rather than pretending
// to train a parameter that can never receive gradient.
fn scorer_bias<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(crate::tensor::Tensor::zeros(&[1]))
}

/// Dispatch over the configured mode. Hybrid concatenates mean first,
/// attention second.
pub fn pool<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    mode: PoolingMode,
    states: Var,
    mask: &[bool],
) -> Result<PooledFeatures> {
    match mode {
        PoolingMode::Cls => Ok(PooledFeatures {
            h_mean: None,
            h_attn: None,
            h_pooled: cls_pool(g, states)?,
        }),
        PoolingMode::Mean => {
            let h = mean_pool(g, states, mask)?;
            Ok(PooledFeatures {
                h_mean: Some(h),
                h_attn: None,
                h_pooled: h,
            })
        }
        PoolingMode::Attn => {
            let b = scorer_bias(g);
            let h = attention_pool(g, states, mask, p.var("pool.attn.w")?, b)?;
            Ok(PooledFeatures {
                h_mean: None,
                h_attn: Some(h),
                h_pooled: h,
            })
        }
        PoolingMode::Hybrid => {
            let h_mean = mean_pool(g, states, mask)?;
            let b = scorer_bias(g);
            let h_attn = attention_pool(g, states, mask, p.var("pool.attn.w")?, b)?;
            let h_pooled = g.concat_cols(&[h_mean, h_attn])?;
            Ok(PooledFeatures {
                h_mean: Some(h_mean),
                h_attn: Some(h_attn),
                h_pooled,
            })
        }
    }
}
