//! Central finite-difference verification of the reverse pass.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare analytic gradients against central differences for a scalar
/// function of the given parameter tensors.
///
/// `build` must be deterministic given the parameter values (run dropout
/// in eval mode or replay a fixed RNG). Relative error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<T, F>(
    params: &[(String, Tensor<T>)],
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut shared: Vec<Rc<Tensor<T>>> = params
        .iter()
        .map(|(_, t)| Rc::new(t.clone()))
        .collect();

    let eval = |shared: &[Rc<Tensor<T>>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = shared.iter().map(|t| graph.param(Rc::clone(t))).collect();
        let loss = build(&mut graph, &vars)?;
        let value = graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric("grad_check loss is not finite".into()));
        }
        Ok((graph, vars, loss))
    };

    let (graph, vars, loss) = eval(&shared)?;
    let mut grads = graph.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| vec![T::zero(); graph.value(v).numel()])
        })
        .collect();
    drop(grads);
    drop(graph);

    let step: T = cast(eps);
    let floor = 1e-8f64;
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;

    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        #[allow(clippy::needless_range_loop)]
        for e in 0..shared[pi].numel() {
            let original = shared[pi].data()[e];

            Rc::get_mut(&mut shared[pi])
                .expect("no outstanding graph references")
                .data_mut()[e] = original + step;
            let (g_plus, _, l_plus) = eval(&shared)?;
            let plus = g_plus.value(l_plus).item();
            drop(g_plus);

            Rc::get_mut(&mut shared[pi])
                .expect("no outstanding graph references")
                .data_mut()[e] = original - step;
            let (g_minus, _, l_minus) = eval(&shared)?;
            let minus = g_minus.value(l_minus).item();
            drop(g_minus);

            Rc::get_mut(&mut shared[pi])
                .expect("no outstanding graph references")
                .data_mut()[e] = original;

            let numeric = (plus - minus).to_f64().unwrap() / (2.0 * eps);
            let a = analytic[pi][e].to_f64().unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst {
                worst = rel;
            }
        }
        overall = overall.max(worst);
        per_tensor.push((name.clone(), worst));
    }

    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: overall,
    })
}

/// Finite-difference check over every parameter tensor of a full model:
/// embed -> encoder layers -> pooling -> head (eval mode) -> smoothed CE.
///
/// The input covers the whole vocabulary and every position with nothing
/// masked, so no embedding row sits idle with a zero gradient at the
/// noise floor. Call with a model built by [`Model::init_with_std`] at a
/// scale around 0.5; the 0.02 training init leaves attention-score
/// gradients too small to measure against central differences.
pub fn full_model_grad_check<T: Scalar>(
    model: &crate::model::Model<T>,
    eps: f64,
) -> Result<GradCheckReport> {
    use crate::model::BoundParams;

    if model.config.feature_extraction.is_some() {
        return Err(Error::Config(
            "gradient check runs on the trainable fine-tune model, not the frozen-feature arm"
                .into(),
        ));
    }
    let config = model.config.clone();
    if config.encoder.max_len < config.encoder.vocab_size {
        return Err(Error::Config(format!(
            "covering input needs max_len >= vocab_size, got {} < {}",
            config.encoder.max_len, config.encoder.vocab_size
        )));
    }
    let ids: Vec<usize> = (0..config.encoder.max_len)
        .map(|i| i % config.encoder.vocab_size)
        .collect();
    let mask = vec![true; ids.len()];
    let target = 1 % config.head.num_classes;
    let named: Vec<(String, Tensor<T>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), (**t).clone()))
        .collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();

    grad_check(&named, eps, move |g, vars| {
        let bound = BoundParams::from_vars(
            names.iter().cloned().zip(vars.iter().copied()).collect(),
        );
        let states =
            crate::encoder::encode_sequence(g, &bound, &config.encoder, &ids, &mask)?;
        let pooled = crate::pooling::pool(g, &bound, config.pooling, states, &mask)?;
        let mut rng = crate::rng::RngState::new(0);
        let logits =
            crate::head::head_forward(g, &bound, &config.head, pooled.h_pooled, false, &mut rng)?;
        g.label_smoothed_ce(logits, target, 0.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = x^2 at x = 3: analytic 6 vs central difference 6.
        let params = vec![("x".to_string(), Tensor::from_rows(&[vec![3.0f64]]).unwrap())];
        let report = grad_check(&params, 1e-5, |g, vars| {
            let sq = g.matmul(vars[0], vars[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{:?}", report);
    }

    #[test]
    fn gelu_sum_on_random_vector() {
        let mut rng = RngState::new(41);
        let x = Tensor::new(vec![1, 4], (0..4).map(|_| rng.next_f64() * 4.0 - 2.0).collect())
            .unwrap();
        let params = vec![("x".to_string(), x)];
        let report = grad_check(&params, 1e-5, |g, vars| {
            let y = g.gelu(vars[0]);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let params = vec![(
            "x".to_string(),
            Tensor::from_rows(&[vec![f64::MAX]]).unwrap(),
        )];
        let err = grad_check(&params, 1e-5, |g, vars| {
            let sq = g.matmul(vars[0], vars[0])?;
            Ok(g.sum_all(sq))
        });
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn every_core_op_matches_finite_differences() {
        // Random inputs in [-2, 2], tolerance 1e-4 (64-bit central differences).
        let mut rng = RngState::new(43);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect(),
            )
            .unwrap()
        };

        // matmul
        let params = vec![
            ("a".to_string(), rand_t(&[3, 4])),
            ("b".to_string(), rand_t(&[4, 2])),
        ];
        let report = grad_check(&params, 1e-5, |g, vars| {
            let c = g.matmul(vars[0], vars[1])?;
            Ok(g.sum_all(c))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "matmul: {:?}", report);

        // layer_norm (weight the outputs so row symmetry does not hide errors)
        let params = vec![
            ("x".to_string(), rand_t(&[2, 5])),
            ("gamma".to_string(), rand_t(&[5])),
            ("beta".to_string(), rand_t(&[5])),
        ];
        let weights = rand_t(&[5, 1]);
        let report = grad_check(&params, 1e-5, move |g, vars| {
            let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            let w = g.constant(weights.clone());
            let projected = g.matmul(y, w)?;
            Ok(g.sum_all(projected))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "layer_norm: {:?}", report);

        // masked softmax
        let params = vec![("s".to_string(), rand_t(&[1, 6]))];
        let mix = rand_t(&[6, 1]);
        let report = grad_check(&params, 1e-5, move |g, vars| {
            let mask = Rc::new(vec![true, true, false, true, true, true]);
            let p = g.softmax_masked(vars[0], mask)?;
            let w = g.constant(mix.clone());
            let projected = g.matmul(p, w)?;
            Ok(g.sum_all(projected))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "softmax_masked: {:?}", report);

        // dropout with a replayed mask (deterministic across rebuilds)
        let params = vec![("x".to_string(), rand_t(&[2, 8]))];
        let report = grad_check(&params, 1e-5, |g, vars| {
            let mut fixed = RngState::new(99);
            let y = g.dropout(vars[0], 0.25, &mut fixed, true)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "dropout: {:?}", report);

        // smoothed cross entropy: gradient softmax - q at 1e-6
        let params = vec![("logits".to_string(), rand_t(&[1, 5]))];
        let report = grad_check(&params, 1e-5, |g, vars| {
            g.label_smoothed_ce(vars[0], 2, 0.1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "smoothed_ce: {:?}", report);
    }
}
