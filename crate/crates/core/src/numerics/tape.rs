//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Ops append nodes holding their output and, when any input needs a gradient,
//! a closure that maps the output gradient to input gradients. Values that only
//! depend on constants carry no closure, so an inference tape (`Tape::inference`)
//! is just a list of intermediate results.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, matmul_nt, matmul_tn};
use super::ops::log_softmax_slice;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub trait GradFn<T: Real> {
    /// Returns one entry per input; `needs[i]` is false for inputs that do
    /// not require a gradient, and those entries may be `None`.
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>>;
}

struct ClosureGrad<F>(F);

impl<T, F> GradFn<T> for ClosureGrad<F>
where
    T: Real,
    F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        (self.0)(grad, needs)
    }
}

/// Wraps a closure as a boxed [`GradFn`].
pub fn grad_fn<T, F>(f: F) -> Box<dyn GradFn<T>>
where
    T: Real,
    F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
{
    Box::new(ClosureGrad(f))
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
}

/// Which argument order the distillation loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T: Real> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn to_arc<T: Real>(t: impl Into<Arc<Tensor<T>>>) -> Arc<Tensor<T>> {
    t.into()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient closures.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.push(Node {
            value: to_arc(value),
            requires_grad: false,
            inputs: Vec::new(),
            grad_fn: None,
        })
    }

    /// A trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.push(Node {
            value: to_arc(value),
            requires_grad: self.grad_enabled,
            inputs: Vec::new(),
            grad_fn: None,
        })
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an op result. `make_grad` is only invoked when some input
    /// requires a gradient.
    pub fn record(&self, value: Tensor<T>, inputs: &[Var], make_grad: impl FnOnce() -> Box<dyn GradFn<T>>) -> Var {
        let requires = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        let (grad_fn, inputs) = if requires {
            (Some(make_grad()), inputs.to_vec())
        } else {
            (None, Vec::new())
        };
        self.push(Node {
            value: Arc::new(value),
            requires_grad: requires,
            inputs,
            grad_fn,
        })
    }

    /// Propagates d`loss` back to every trainable leaf that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::filled(root.value.shape().to_vec(), T::one()));
        let mut out = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.grad_fn {
                None => {
                    if node.requires_grad {
                        out.insert(Var(idx), grad);
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = node.inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
                    let input_grads = f.backward(&grad, &needs)?;
                    for ((inp, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        let (Some(g), true) = (g, *need) else {
                            continue;
                        };
                        match &mut pending[inp.0] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::matrix(m, n, kernels::matmul(av.data(), bv.data(), m, k, n))?;
        Ok(self.record(out, &[a, b], || {
            grad_fn(move |g: &Tensor<T>, needs: &[bool]| {
                let da = needs[0]
                    .then(|| Tensor::matrix(m, k, matmul_nt(g.data(), bv.data(), m, n, k)))
                    .transpose()?;
                let db = needs[1]
                    .then(|| Tensor::matrix(k, n, matmul_tn(av.data(), g.data(), m, k, n)))
                    .transpose()?;
                Ok(vec![da, db])
            })
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = (*av).clone();
        out.add_assign(&bv)?;
        Ok(self.record(out, &[a, b], || {
            grad_fn(|g: &Tensor<T>, _: &[bool]| Ok(vec![Some(g.clone()), Some(g.clone())]))
        }))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_bias")?;
        let bv = self.value(bias);
        if bv.numel() != n {
            return Err(Error::shape("add_bias", format!("bias {:?} for width {n}", bv.shape())));
        }
        let mut out = (*self.value(x)).clone();
        for row in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let bias_shape = bv.shape().to_vec();
        Ok(self.record(out, &[x, bias], || {
            grad_fn(move |g: &Tensor<T>, needs: &[bool]| {
                let db = if needs[1] {
                    let mut acc = vec![T::zero(); n];
                    for row in g.data().chunks_exact(n.max(1)).take(m) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Some(Tensor::new(bias_shape.clone(), acc)?)
                } else {
                    None
                };
                Ok(vec![Some(g.clone()), db])
            })
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], || {
            grad_fn(move |g: &Tensor<T>, needs: &[bool]| {
                let prod = |other: &Tensor<T>| {
                    let d = g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), d)
                };
                let da = needs[0].then(|| prod(&bv)).transpose()?;
                let db = needs[1].then(|| prod(&av)).transpose()?;
                Ok(vec![da, db])
            })
        }))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::silu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        let s = kernels::sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                Ok(vec![Some(Tensor::new(g.shape().to_vec(), d)?)])
            })
        }))
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let d = g.data().iter().map(|&v| v * s).collect();
                Ok(vec![Some(Tensor::new(g.shape().to_vec(), d)?)])
            })
        }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        let shape = xv.shape().to_vec();
        Ok(self.record(Tensor::scalar(acc), &[x], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| Ok(vec![Some(Tensor::filled(shape.clone(), g.item()))]))
        }))
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&self, x: Var, weight: Var, eps: T) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "rms_norm")?;
        let (xv, wv) = (self.value(x), self.value(weight));
        if wv.numel() != d {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {d}", wv.shape())));
        }
        let mut out = vec![T::zero(); m * d];
        let inv = kernels::rms_norm_into(xv.data(), wv.data(), eps, &mut out);
        let out = Tensor::matrix(m, d, out)?;
        Ok(self.record(out, &[x, weight], || {
            grad_fn(move |g: &Tensor<T>, needs: &[bool]| {
                let w = wv.data();
                let inv_d = T::one() / T::c(d as f64);
                let mut dx = vec![T::zero(); m * d];
                let mut dw = vec![T::zero(); d];
                for r in 0..m {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let ir = inv[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + gr[j] * w[j] * xr[j];
                    }
                    let coef = ir * ir * ir * dot * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = ir * w[j] * gr[j] - coef * xr[j];
                        dw[j] = dw[j] + gr[j] * xr[j] * ir;
                    }
                }
                let dw = needs[1].then(|| Tensor::new(wv.shape().to_vec(), dw)).transpose()?;
                Ok(vec![Some(Tensor::matrix(m, d, dx)?), dw])
            })
        }))
    }

    /// Looks up rows of a `vocab×d` table.
    pub fn embedding(&self, table: Var, tokens: &[u32]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Invalid(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(tv.row(t as usize));
        }
        let out = Tensor::matrix(tokens.len(), d, data)?;
        let tokens = tokens.to_vec();
        Ok(self.record(out, &[table], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let mut dt = Tensor::zeros(vec![vocab, d]);
                for (r, &t) in tokens.iter().enumerate() {
                    let src = g.row(r);
                    for (a, &v) in dt.row_mut(t as usize).iter_mut().zip(src) {
                        *a = *a + v;
                    }
                }
                Ok(vec![Some(dt)])
            })
        }))
    }

    /// Stacks `b` under `a`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (ma, n) = self.matrix_dims(a, "concat_rows")?;
        let (mb, n2) = self.matrix_dims(b, "concat_rows")?;
        if n != n2 {
            return Err(Error::shape("concat_rows", format!("widths {n} and {n2}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::matrix(ma + mb, n, data)?;
        Ok(self.record(out, &[a, b], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let (top, bottom) = g.data().split_at(ma * n);
                Ok(vec![
                    Some(Tensor::matrix(ma, n, top.to_vec())?),
                    Some(Tensor::matrix(mb, n, bottom.to_vec())?),
                ])
            })
        }))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = Tensor::matrix(len, n, self.value(x).data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.record(out, &[x], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let mut d = vec![T::zero(); m * n];
                d[start * n..(start + len) * n].copy_from_slice(g.data());
                Ok(vec![Some(Tensor::matrix(m, n, d)?)])
            })
        }))
    }

    /// Copies the listed rows (repeats allowed).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let out = self.value(x).select_rows(idx);
        let idx = idx.to_vec();
        Ok(self.record(out, &[x], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let mut d = Tensor::zeros(vec![m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a = *a + v;
                    }
                }
                Ok(vec![Some(d)])
            })
        }))
    }

    /// Mean over rows of the KL divergence between fixed teacher
    /// probabilities and `softmax(student_logits)`.
    pub fn kl_rows(&self, student_logits: Var, teacher: &Tensor<T>, direction: KlDirection) -> Result<Var> {
        let (m, v) = self.matrix_dims(student_logits, "kl_rows")?;
        if teacher.shape() != [m, v] {
            return Err(Error::shape(
                "kl_rows",
                format!("teacher {:?} vs student [{m}×{v}]", teacher.shape()),
            ));
        }
        if m == 0 {
            return Err(Error::Invalid("kl_rows over zero rows".into()));
        }
        let zv = self.value(student_logits);
        let floor = T::c(1e-12);
        let mut grad = vec![T::zero(); m * v];
        let mut total = T::zero();
        let mut log_s = vec![T::zero(); v];
        let inv_m = T::one() / T::c(m as f64);
        for r in 0..m {
            log_softmax_slice(zv.row(r), &mut log_s);
            let t = teacher.row(r);
            let gr = &mut grad[r * v..(r + 1) * v];
            let mut kl = T::zero();
            match direction {
                KlDirection::TeacherStudent => {
                    for j in 0..v {
                        if t[j] > T::zero() {
                            kl = kl + t[j] * (t[j].ln() - log_s[j]);
                        }
                        gr[j] = (log_s[j].exp() - t[j]) * inv_m;
                    }
                }
                KlDirection::StudentTeacher => {
                    let mut mean_a = T::zero();
                    for j in 0..v {
                        let s = log_s[j].exp();
                        let a = log_s[j] - t[j].max(floor).ln();
                        kl = kl + s * a;
                        mean_a = mean_a + s * a;
                        gr[j] = a;
                    }
                    for j in 0..v {
                        gr[j] = log_s[j].exp() * (gr[j] - mean_a) * inv_m;
                    }
                }
            }
            total = total + kl;
        }
        let loss = total * inv_m;
        if !loss.is_finite() {
            return Err(Error::NonFinite("kl_rows".into()));
        }
        let grad = Tensor::matrix(m, v, grad)?;
        Ok(self.record(Tensor::scalar(loss), &[student_logits], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let s = g.item();
                let d = grad.data().iter().map(|&x| x * s).collect();
                Ok(vec![Some(Tensor::matrix(m, v, d)?)])
            })
        }))
    }

    /// Mean next-token cross-entropy.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (m, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::shape("cross_entropy", format!("{m} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Invalid(format!("target {bad} outside vocabulary of {v}")));
        }
        let zv = self.value(logits);
        let inv_m = T::one() / T::c(m as f64);
        let mut grad = vec![T::zero(); m * v];
        let mut total = T::zero();
        let mut log_s = vec![T::zero(); v];
        for r in 0..m {
            log_softmax_slice(zv.row(r), &mut log_s);
            let t = targets[r] as usize;
            total = total - log_s[t];
            let gr = &mut grad[r * v..(r + 1) * v];
            for j in 0..v {
                gr[j] = log_s[j].exp() * inv_m;
            }
            gr[t] = gr[t] - inv_m;
        }
        let loss = total * inv_m;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let grad = Tensor::matrix(m, v, grad)?;
        Ok(self.record(Tensor::scalar(loss), &[logits], || {
            grad_fn(move |g: &Tensor<T>, _: &[bool]| {
                let s = g.item();
                let d = grad.data().iter().map(|&x| x * s).collect();
                Ok(vec![Some(Tensor::matrix(m, v, d)?)])
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let tape = Tape::<f64>::new();
        let w = tape.param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = tape.constant(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dW sum(x·W) = xᵀ broadcast over output columns
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_on_constant_is_detached() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Detached)));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::<f32>::inference();
        let w = tape.param(Tensor::scalar(1.0));
        assert!(!tape.requires_grad(w));
        let s = tape.sum(w).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn reused_value_accumulates() {
        let tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0, -2.0]);
    }
}
