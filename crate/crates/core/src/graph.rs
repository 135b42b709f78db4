//! Reverse-mode autodiff over a flat tape of tensor nodes.
//!
//! Each op stores its output value plus a closure holding the backward
//! rule; closures capture `Rc` clones of whatever values they need, so
//! registering a large parameter tensor as a leaf copies nothing.
//! Nodes are appended in topological order, and `backward` walks the
//! tape in reverse accumulating gradients node by node.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::RngState;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    backward: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.by_node[var.0].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.by_node[var.0].take()
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut Vec<Option<Vec<T>>>,
    sizes: &'a [usize],
    wanted: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Mutable zero-initialized gradient slot for node `id`, or None if
    /// no gradient is required there.
    fn slot(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.wanted[id] {
            return None;
        }
        let entry = &mut self.grads[id];
        if entry.is_none() {
            *entry = Some(vec![T::zero(); self.sizes[id]]);
        }
        entry.as_deref_mut()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, backward: Option<BackFn<T>>) -> Var {
        self.push_rc(Rc::new(value), needs_grad, backward)
    }

    fn push_rc(
        &mut self,
        value: Rc<Tensor<T>>,
        needs_grad: bool,
        backward: Option<BackFn<T>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, var: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[var.0].value)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Trainable leaf; shares the tensor storage with the caller.
    pub fn param(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.push_rc(value, true, None)
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_rc(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.push_rc(value, false, None)
    }

    /// Element-wise sum of same-shaped inputs.
    pub fn addn(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let shape = first.shape().to_vec();
        let mut data = first.data().to_vec();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "addn shape mismatch: {:?} vs {:?}",
                    shape,
                    v.shape()
                )));
            }
            for (d, &x) in data.iter_mut().zip(v.data()) {
                *d += x;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                for &id in &ids {
                    if let Some(slot) = sink.slot(id) {
                        for (s, &g) in slot.iter_mut().zip(dz) {
                            *s += g;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(shape, data)?, needs, back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.addn(&[a, b])
    }

    /// Multiply every element by a fixed constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let f: T = cast(factor);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for (s, &g) in slot.iter_mut().zip(dz) {
                        *s += g * f;
                    }
                }
            }) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Broadcast-add a length-d bias row to an n x d matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "bias length {} does not match row width {d}",
                self.value(bias).numel()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let (xid, bid) = (x.0, bias.0);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for (s, &g) in slot.iter_mut().zip(dz) {
                        *s += g;
                    }
                }
                if let Some(slot) = sink.slot(bid) {
                    for i in 0..n {
                        for (j, s) in slot.iter_mut().enumerate() {
                            *s += dz[i * d + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![n, d], data)?, needs, back))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        let (av, bv) = (self.rc(a), self.rc(b));
        let (m, _) = av.dims2()?;
        let (_, n) = bv.dims2()?;
        let (aid, bid) = (a.0, b.0);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                let dc = Tensor::new(vec![m, n], dz.to_vec()).expect("dz matches output");
                if need_a {
                    // dA = dC . B^T
                    let da = ops::matmul_nt(&dc, &bv).expect("backward shapes");
                    if let Some(slot) = sink.slot(aid) {
                        for (s, &g) in slot.iter_mut().zip(da.data()) {
                            *s += g;
                        }
                    }
                }
                if need_b {
                    // dB = A^T . dC
                    let db = ops::matmul_tn(&av, &dc).expect("backward shapes");
                    if let Some(slot) = sink.slot(bid) {
                        for (s, &g) in slot.iter_mut().zip(db.data()) {
                            *s += g;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(value, needs, back))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = ops::transpose(self.value(x))?;
        let (m, n) = self.value(x).dims2()?;
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for i in 0..m {
                        for j in 0..n {
                            slot[i * n + j] += dz[j * m + i];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(value, needs, back))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of width {d}",
                start + len
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for i in 0..n {
                        for j in 0..len {
                            let t = i * d + start + j;
                            slot[t] += dz[i * len + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![n, len], data)?, needs, back))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "row slice {start}..{} out of height {n}",
                start + len
            )));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for (s, &g) in slot[start * d..(start + len) * d].iter_mut().zip(dz) {
                        *s += g;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![len, d], data)?, needs, back))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.value(p).dims2()?;
            if np != n {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {n} vs {np}"
                )));
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths_c = widths.clone();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                let mut offset = 0;
                for (&id, &w) in ids.iter().zip(&widths_c) {
                    if let Some(slot) = sink.slot(id) {
                        for i in 0..n {
                            for j in 0..w {
                                slot[i * w + j] += dz[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![n, total], data)?, needs, back))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        let needs = self.needs(x);
        let xv = self.rc(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for ((s, &g), &xval) in slot.iter_mut().zip(dz).zip(xv.data()) {
                        *s += g * ops::gelu_grad_scalar(xval);
                    }
                }
            }) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (n, d) = self.value(x).dims2()?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xv, gv) = (self.rc(x), self.rc(gamma));
        let (xid, gid, bid) = (x.0, gamma.0, beta.0);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                let count: T = cast(d as f64);
                let epsilon: T = cast(eps);
                // Recompute per-row statistics; cheaper than caching at desk scale.
                for i in 0..n {
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let dzrow = &dz[i * d..(i + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / count;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / count;
                    let inv_std = T::one() / (var + epsilon).sqrt();
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv_std).collect();

                    if let Some(slot) = sink.slot(bid) {
                        for (s, &g) in slot.iter_mut().zip(dzrow) {
                            *s += g;
                        }
                    }
                    if let Some(slot) = sink.slot(gid) {
                        for ((s, &g), &xh) in slot.iter_mut().zip(dzrow).zip(&xhat) {
                            *s += g * xh;
                        }
                    }
                    if sink.wanted[xid] {
                        let dxhat: Vec<T> =
                            dzrow.iter().zip(gv.data()).map(|(&g, &gm)| g * gm).collect();
                        let sum_dxhat = dxhat.iter().copied().sum::<T>();
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                        if let Some(slot) = sink.slot(xid) {
                            let srow = &mut slot[i * d..(i + 1) * d];
                            for j in 0..d {
                                let term = count * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat;
                                srow[j] += inv_std / count * term;
                            }
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(value, needs, back))
    }

    /// Row-wise masked softmax. Masked entries get probability exactly 0;
    /// rows with no unmasked entry yield all zeros (their consumers must
    /// never read them).
    pub fn softmax_rows_masked(&mut self, scores: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (n, m) = self.value(scores).dims2()?;
        if mask.len() != n * m {
            return Err(Error::Shape(format!(
                "mask length {} does not match scores {n}x{m}",
                mask.len()
            )));
        }
        let sd = self.value(scores).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(ops::softmax_masked_unchecked(
                &sd[i * m..(i + 1) * m],
                &mask[i * m..(i + 1) * m],
            ));
        }
        let value = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(scores);
        let sid = scores.0;
        let out = Rc::new(value);
        let out_for_back = Rc::clone(&out);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(sid) {
                    for i in 0..n {
                        let p = &out_for_back.data()[i * m..(i + 1) * m];
                        let dzrow = &dz[i * m..(i + 1) * m];
                        let dot = p
                            .iter()
                            .zip(dzrow)
                            .map(|(&pi, &gi)| pi * gi)
                            .sum::<T>();
                        let srow = &mut slot[i * m..(i + 1) * m];
                        for j in 0..m {
                            srow[j] += p[j] * (dzrow[j] - dot);
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push_rc(out, needs, back))
    }

    /// Single-row masked softmax with the public degenerate-mask contract.
    pub fn softmax_masked(&mut self, scores: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateMask(
                "softmax_masked requires at least one unmasked position".into(),
            ));
        }
        self.softmax_rows_masked(scores, mask)
    }

    /// Inverted dropout node. Draws one decision per element from `rng`.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        let len = self.value(x).numel();
        let factors = ops::dropout_factors::<T>(len, rate, rng, training)?;
        let Some(factors) = factors else {
            // Identity: reuse the value, pass gradients straight through.
            let needs = self.needs(x);
            let xid = x.0;
            let value = self.rc(x);
            let back: Option<BackFn<T>> = needs.then(|| {
                Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                    if let Some(slot) = sink.slot(xid) {
                        for (s, &g) in slot.iter_mut().zip(dz) {
                            *s += g;
                        }
                    }
                }) as BackFn<T>
            });
            return Ok(self.push_rc(value, needs, back));
        };
        let factors = Rc::new(factors);
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(factors.iter())
            .map(|(&v, &f)| v * f)
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            let factors = Rc::clone(&factors);
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for ((s, &g), &f) in slot.iter_mut().zip(dz).zip(factors.iter()) {
                        *s += g * f;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(value, needs, back))
    }

    /// Mask-aware mean over rows: h[d] = sum over unmasked rows / count.
    /// Masked rows are skipped entirely, so appended padding cannot
    /// perturb the result even at the bit level.
    pub fn mean_pool(&mut self, states: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (n, d) = self.value(states).dims2()?;
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match {n} rows",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateMask(
                "mean_pool requires at least one unmasked row".into(),
            ));
        }
        let inv: T = cast(1.0 / count as f64);
        let sd = self.value(states).data();
        let mut data = vec![T::zero(); d];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    data[j] += sd[i * d + j];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let needs = self.needs(states);
        let sid = states.0;
        let mask_c = Rc::clone(&mask);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(sid) {
                    for (i, &m) in mask_c.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                slot[i * d + j] += dz[j] * inv;
                            }
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![1, d], data)?, needs, back))
    }

    /// Convex mix of rows: h[j] = sum over unmasked k of alpha[k] *
    /// states[k][j]. Masked rows are skipped outright, like `mean_pool`.
    pub fn weighted_pool(
        &mut self,
        states: Var,
        alpha: Var,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let (n, d) = self.value(states).dims2()?;
        let (one, an) = self.value(alpha).dims2()?;
        if one != 1 || an != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "weighted_pool expects alpha 1x{n} and mask length {n}, got {:?} and {}",
                self.value(alpha).shape(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateMask(
                "weighted_pool requires at least one unmasked row".into(),
            ));
        }
        let sd = self.value(states).data();
        let ad = self.value(alpha).data();
        let mut data = vec![T::zero(); d];
        for (k, &m) in mask.iter().enumerate() {
            if m {
                let a = ad[k];
                for j in 0..d {
                    data[j] += a * sd[k * d + j];
                }
            }
        }
        let needs = self.needs(states) || self.needs(alpha);
        let (need_s, need_a) = (self.needs(states), self.needs(alpha));
        let (sv, av) = (self.rc(states), self.rc(alpha));
        let (sid, aid) = (states.0, alpha.0);
        let mask_c = Rc::clone(&mask);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if need_a {
                    if let Some(slot) = sink.slot(aid) {
                        for (k, &m) in mask_c.iter().enumerate() {
                            if m {
                                let row = &sv.data()[k * d..(k + 1) * d];
                                let acc = dz
                                    .iter()
                                    .zip(row)
                                    .fold(T::zero(), |a, (&g, &v)| a + g * v);
                                slot[k] += acc;
                            }
                        }
                    }
                }
                if need_s {
                    if let Some(slot) = sink.slot(sid) {
                        for (k, &m) in mask_c.iter().enumerate() {
                            if m {
                                let a = av.data()[k];
                                for j in 0..d {
                                    slot[k * d + j] += a * dz[j];
                                }
                            }
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![1, d], data)?, needs, back))
    }

    /// Token + positional embedding lookup: out[t] = tok[ids[t]] + pos[t].
    pub fn embed(&mut self, token_table: Var, pos_table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(token_table).dims2()?;
        let (max_len, d2) = self.value(pos_table).dims2()?;
        if d != d2 {
            return Err(Error::Shape(format!(
                "embedding widths differ: token {d} vs positional {d2}"
            )));
        }
        if ids.len() > max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {max_len}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Shape(format!(
                "token id {bad} out of vocabulary range {vocab}"
            )));
        }
        let n = ids.len();
        let tok = self.value(token_table).data();
        let pos = self.value(pos_table).data();
        let mut data = Vec::with_capacity(n * d);
        for (t, &id) in ids.iter().enumerate() {
            for j in 0..d {
                data.push(tok[id * d + j] + pos[t * d + j]);
            }
        }
        let needs = self.needs(token_table) || self.needs(pos_table);
        let (tid, pid) = (token_table.0, pos_table.0);
        let ids_c = ids.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(tid) {
                    for (t, &id) in ids_c.iter().enumerate() {
                        for j in 0..d {
                            slot[id * d + j] += dz[t * d + j];
                        }
                    }
                }
                if let Some(slot) = sink.slot(pid) {
                    for t in 0..ids_c.len() {
                        for j in 0..d {
                            slot[t * d + j] += dz[t * d + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::new(vec![n, d], data)?, needs, back))
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let len = self.value(x).numel();
        let needs = self.needs(x);
        let xid = x.0;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(xid) {
                    for s in slot.iter_mut().take(len) {
                        *s += dz[0];
                    }
                }
            }) as BackFn<T>
        });
        self.push(Tensor::scalar(total), needs, back)
    }

    /// Label-smoothed cross entropy against logits (a 1 x C row).
    /// q_k = (1-eps) * [k == target] + eps / C; the gradient w.r.t. the
    /// logits is softmax(logits) - q.
    pub fn label_smoothed_ce(&mut self, logits: Var, target: usize, epsilon: f64) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if rows != 1 {
            return Err(Error::Shape(format!(
                "label_smoothed_ce expects a single logit row, got {rows}"
            )));
        }
        if target >= classes {
            return Err(Error::Index(format!(
                "target {target} out of range for {classes} classes"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "smoothing factor must be in [0, 1), got {epsilon}"
            )));
        }
        let (loss, probs) =
            crate::objectives::smoothed_ce_forward(self.value(logits).data(), target, epsilon);
        let needs = self.needs(logits);
        let lid = logits.0;
        let eps_t: T = cast(epsilon);
        let uniform: T = cast(epsilon / classes as f64);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |dz: &[T], sink: &mut GradSink<T>| {
                if let Some(slot) = sink.slot(lid) {
                    for (k, s) in slot.iter_mut().enumerate() {
                        let mut q = uniform;
                        if k == target {
                            q += T::one() - eps_t;
                        }
                        *s += dz[0] * (probs[k] - q);
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::scalar(loss), needs, back))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.numel()).collect();
        let wanted: Vec<bool> = self.nodes.iter().map(|nd| nd.needs_grad).collect();
        if wanted[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    sizes: &sizes,
                    wanted: &wanted,
                };
                back(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        g.param(Rc::new(Tensor::from_rows(rows).unwrap()))
    }

    #[test]
    fn matmul_backward_rule() {
        // loss = sum(A.B); dA = 1.B^T, dB = A^T.1
        let mut g = Graph::new();
        let a = leaf(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = leaf(&mut g, &[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        // dA rows: [5+6, 7+8] each
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // dB rows: [1+3, 1+3; 2+4, 2+4]
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[vec![2.0]]);
        let c = g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let prod = g.matmul(a, c).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // loss = sum(x + x) => dx = 2
        let mut g = Graph::new();
        let x = leaf(&mut g, &[vec![1.0, 2.0]]);
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_masked_zero_rows_for_masked_queries() {
        let mut g = Graph::new();
        let s = leaf(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mask = Rc::new(vec![true, true, false, false]);
        let p = g.softmax_rows_masked(s, mask).unwrap();
        let row1 = &g.value(p).data()[2..4];
        assert_eq!(row1, &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[vec![1.0, 2.0]]);
        assert!(g.backward(x).is_err());
        let inf = g.constant(Tensor::scalar(f64::INFINITY));
        assert!(matches!(
            g.backward(inf),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn dropout_eval_shares_value_and_passes_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[vec![1.0, -2.0, 3.0]]);
        let mut rng = RngState::new(4);
        let y = g.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_pool_skips_masked_rows_bitwise() {
        let mut g = Graph::new();
        let s = leaf(
            &mut g,
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]],
        );
        let pooled = g.mean_pool(s, Rc::new(vec![true, true, false])).unwrap();
        assert_eq!(g.value(pooled).data(), &[2.0, 3.0]);
    }

    #[test]
    fn label_smoothed_ce_gradient_is_softmax_minus_q() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, &[vec![3.0f64.ln(), 0.0]]);
        let loss = g.label_smoothed_ce(logits, 0, 0.1).unwrap();
        assert_abs_diff_eq!(
            g.value(loss).item(),
            0.3426126868851863,
            epsilon = 1e-12
        );
        let grads = g.backward(loss).unwrap();
        let dl = grads.get(logits).unwrap();
        assert_abs_diff_eq!(dl[0], 0.75 - 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(dl[1], 0.25 - 0.05, epsilon = 1e-12);
    }
}
