//! Multi-sample dropout classification head: a shared dense + LayerNorm +
//! GELU trunk, several dropout paths through a shared classifier, and the
//! path-averaged logits.

use serde::{Deserialize, Serialize};

use crate::encoder::LN_EPS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::BoundParams;
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default = "default_paths")]
    pub num_paths: usize,
    #[serde(default = "default_rates")]
    pub dropout_rates: Vec<f64>,
    /// Dense trunk width; defaults to d_model at model build time.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
}

fn default_paths() -> usize {
    5
}

fn default_rates() -> Vec<f64> {
    vec![0.10, 0.15, 0.20, 0.25, 0.30]
}

impl HeadConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        HeadConfig {
            num_paths: default_paths(),
            dropout_rates: default_rates(),
            hidden_dim: None,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        if self.dropout_rates.len() != self.num_paths {
            return Err(Error::Config(format!(
                "{} dropout rates for {} paths",
                self.dropout_rates.len(),
                self.num_paths
            )));
        }
        if self.num_paths == 0 {
            return Err(Error::Config("head needs at least one path".into()));
        }
        for &r in &self.dropout_rates {
            crate::ops::validate_dropout_rate(r)?;
        }
        Ok(())
    }
}

/// Logits (1 x C) for one pooled vector.
///
/// z = GELU(LN(dense(h))); each path classifies an independently
/// dropped-out copy of z; paths share all weights and the outputs are
/// averaged. Path i draws its mask from substream i of `rng`, and the
/// base stream advances by one draw per call so consecutive calls get
/// fresh masks. In eval mode every path is the identity, so the single
/// shared pass is returned directly (bitwise equal to a 1-path rate-0
/// head).
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &HeadConfig,
    h: Var,
    training: bool,
    rng: &mut RngState,
) -> Result<Var> {
    config.validate()?;
    let dense = g.matmul(h, p.var("head.dense.w")?)?;
    let dense = g.add_bias(dense, p.var("head.dense.b")?)?;
    let normed = g.layer_norm(dense, p.var("head.ln.gamma")?, p.var("head.ln.beta")?, LN_EPS)?;
    let z = g.gelu(normed);

    let classify = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let logits = g.matmul(x, p.var("head.classify.w")?)?;
        g.add_bias(logits, p.var("head.classify.b")?)
    };

    if !training {
        return classify(g, z);
    }

    let mut paths = Vec::with_capacity(config.num_paths);
    for (i, &rate) in config.dropout_rates.iter().enumerate() {
        let mut sub = rng.substream(i as u64);
        let dropped = g.dropout(z, rate, &mut sub, true)?;
        paths.push(classify(g, dropped)?);
    }
    rng.next_u64();
    if paths.len() == 1 {
        return Ok(g.scale(paths[0], 1.0));
    }
    let total = g.addn(&paths)?;
    Ok(g.scale(total, 1.0 / config.num_paths as f64))
}
