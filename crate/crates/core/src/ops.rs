//! Forward tensor math. The autodiff layer in [`crate::graph`] wraps these
//! kernels and adds the matching backward rules.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// C\[i]\[j] = sum_t A\[i]\[t] * B\[t]\[j].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// A (m x k) times B-transpose (n x k) -> m x n.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt inner dimensions differ: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for t in 0..k {
                acc += ad[i * k + t] * bd[j * k + t];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// A-transpose (k x m) times B (k x n) -> m x n.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_tn inner dimensions differ: {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let arow = &ad[t * m..(t + 1) * m];
        let brow = &bd[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Per-row normalization with biased variance (divide by d):
/// y = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if d == 0 {
        return Err(Error::Shape("layer_norm over zero-width rows".into()));
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape(format!(
            "layer_norm params must have length {d}, got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let epsilon: T = cast(eps);
    let count: T = cast(d as f64);
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / count;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / count;
        let inv_std = T::one() / (var + epsilon).sqrt();
        for j in 0..d {
            out[i * d + j] = gamma.data()[j] * (row[j] - mean) * inv_std + beta.data()[j];
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Standard normal CDF, exact erf form.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let c: T = cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * cast::<T>(0.5)).exp()
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Softmax over the unmasked positions; masked positions get exactly 0.
pub fn softmax_masked<T: Scalar>(scores: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "softmax_masked: {} scores vs {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask(
            "softmax_masked requires at least one unmasked position".into(),
        ));
    }
    Ok(softmax_masked_unchecked(scores, mask))
}

/// Internal variant: an all-masked row yields all zeros instead of an error.
/// Used for padded query rows inside attention, whose outputs are never read.
pub(crate) fn softmax_masked_unchecked<T: Scalar>(scores: &[T], mask: &[bool]) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    let mut max = T::neg_infinity();
    for (&s, &m) in scores.iter().zip(mask) {
        if m && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        return out;
    }
    let mut denom = T::zero();
    for (i, (&s, &m)) in scores.iter().zip(mask).enumerate() {
        if m {
            let e = (s - max).exp();
            out[i] = e;
            denom += e;
        }
    }
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o /= denom;
        }
    }
    out
}

pub fn validate_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Keep-or-zero factors for inverted dropout: 0 with probability `rate`,
/// otherwise 1/(1-rate). `None` means identity (eval mode or rate 0).
pub fn dropout_factors<T: Scalar>(
    len: usize,
    rate: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<Option<Vec<T>>> {
    validate_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep_scale: T = cast(1.0 / (1.0 - rate));
    Ok(Some(
        (0..len)
            .map(|_| {
                if rng.next_f64() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect(),
    ))
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity when `training` is false or `rate` is 0.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<Tensor<T>> {
    match dropout_factors::<T>(x.numel(), rate, rng, training)? {
        None => Ok(x.clone()),
        Some(factors) => {
            let data = x
                .data()
                .iter()
                .zip(&factors)
                .map(|(&v, &f)| v * f)
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}
