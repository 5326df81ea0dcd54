//! Wengert tape: records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the value on its tape; stable for the tape's lifetime.
    pub fn index(self) -> usize {
        self.index
    }
}

/// Primitive kinds reachable through [`Tape::forward_primitive`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Hadamard,
    Relu,
    Scale(f64),
    Sum,
    Mean,
    Transpose,
    ConcatChannels,
    Square,
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses `matmul`, `add`, ..., with `scale:<factor>` for scaling.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "hadamard" => Self::Hadamard,
            "relu" => Self::Relu,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "transpose" => Self::Transpose,
            "concat_channels" => Self::ConcatChannels,
            "square" => Self::Square,
            other => match other.strip_prefix("scale:").map(str::parse::<f64>) {
                Some(Ok(c)) => Self::Scale(c),
                _ => return Err(Error::UnknownOp(other.to_string())),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rank-3 left operand, rank-2 right operand shared over the batch
    Right,
    /// rank-2 left operand shared over the batch, rank-3 right operand
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatMulMode {
    /// `(m,k)·(k,n)`
    Plain,
    /// `(B,m,k)·(k,n)`
    BatchedLhs,
    /// `(m,k)·(B,k,n)`
    SharedLhs,
    /// `(B,m,k)·(B,k,n)`
    Batched,
}

#[derive(Clone, Debug)]
enum Record<S> {
    Leaf,
    MatMul { a: usize, b: usize, mode: MatMulMode, m: usize, k: usize, n: usize, batch: usize },
    Add { a: usize, b: usize, bcast: Bcast },
    Sub { a: usize, b: usize, bcast: Bcast },
    Hadamard { a: usize, b: usize, bcast: Bcast },
    AddBias { x: usize, bias: usize },
    MulChannel { x: usize, scale: usize },
    Relu { x: usize },
    Scale { x: usize, c: S },
    Square { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Transpose { x: usize },
    Concat { parts: Vec<usize> },
    MaskedSoftmax { x: usize, mask: Arc<[bool]> },
    SoftmaxLast { x: usize },
    Scatter { x: usize, positions: Arc<[usize]> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor<S>, inv_std: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    record: Record<S>,
    requires_grad: bool,
}

/// Per-channel statistics of a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance.
    pub var: Vec<S>,
    /// Number of samples pooled per channel.
    pub count: usize,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    map: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.map.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Reverse-mode recording of a computation over [`Tensor`] values.
///
/// A tape is single-threaded. Every operation stores its result; a record
/// with saved context is kept only when some input requires a gradient.
pub struct Tape<S: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Tensor<S>>>,
    n_records: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            n_records: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded (differentiable) operations.
    pub fn records(&self) -> usize {
        self.n_records
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value; gradients accumulate for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Record::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf_grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<S>, record: Record<S>, requires_grad: bool) -> Var {
        let record = if requires_grad { record } else { Record::Leaf };
        if !matches!(record, Record::Leaf) {
            self.n_records += 1;
        }
        self.nodes.push(Node { value, record, requires_grad });
        self.leaf_grads.push(None);
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVariable { expected: self.id, found: v.tape });
        }
        Ok(v.index)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Applies a primitive by kind, mostly for generic harnesses.
    pub fn forward_primitive(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Hadamard => 2,
            Primitive::ConcatChannels => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!("{kind:?} expects {arity} inputs, got {}", inputs.len())));
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Hadamard => self.hadamard(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Scale(c) => self.scale(inputs[0], S::of(c)),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::ConcatChannels => self.concat_channels(inputs),
            Primitive::Square => self.square(inputs[0]),
        }
    }

    // ---- forward primitives ------------------------------------------------

    /// Matrix product; a rank-2 operand is shared across the batch of a
    /// rank-3 operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let err = || Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() };
        let (mode, batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (MatMulMode::Plain, 1, sa[0], sa[1], sb[1]),
            (3, 2) if sa[2] == sb[0] => (MatMulMode::BatchedLhs, sa[0], sa[1], sa[2], sb[1]),
            (2, 3) if sa[1] == sb[1] => (MatMulMode::SharedLhs, sb[0], sa[0], sa[1], sb[2]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (MatMulMode::Batched, sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(err()),
        };
        let av = self.nodes[ia].value.data();
        let bv = self.nodes[ib].value.data();
        let (shape, data) = match mode {
            MatMulMode::Plain => {
                let mut out = vec![S::zero(); m * n];
                gemm(MatRef::new(av, m, k), MatRef::new(bv, k, n), &mut out, false);
                (vec![m, n], out)
            }
            MatMulMode::BatchedLhs => {
                let mut out = vec![S::zero(); batch * m * n];
                gemm(MatRef::new(av, batch * m, k), MatRef::new(bv, k, n), &mut out, false);
                (vec![batch, m, n], out)
            }
            MatMulMode::SharedLhs => {
                let mut out = vec![S::zero(); batch * m * n];
                for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
                    let xb = &bv[bi * k * n..(bi + 1) * k * n];
                    gemm(MatRef::new(av, m, k), MatRef::new(xb, k, n), chunk, false);
                }
                (vec![batch, m, n], out)
            }
            MatMulMode::Batched => {
                let mut out = vec![S::zero(); batch * m * n];
                for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let xb = &bv[bi * k * n..(bi + 1) * k * n];
                    gemm(MatRef::new(ab, m, k), MatRef::new(xb, k, n), chunk, false);
                }
                (vec![batch, m, n], out)
            }
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(shape, data)?, Record::MatMul { a: ia, b: ib, mode, m, k, n, batch }, rg))
    }

    fn bcast(&self, op: &'static str, ia: usize, ib: usize) -> Result<Bcast> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if sa.len() == 3 && sb.len() == 2 && sa[1..] == sb[..] {
            Ok(Bcast::Right)
        } else if sa.len() == 2 && sb.len() == 3 && sb[1..] == sa[..] {
            Ok(Bcast::Left)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn elementwise(
        &self,
        ia: usize,
        ib: usize,
        bcast: Bcast,
        f: impl Fn(S, S) -> S,
    ) -> Tensor<S> {
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (a, b) = (ta.data(), tb.data());
        match bcast {
            Bcast::Same => Tensor::new(ta.shape(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()),
            Bcast::Right => {
                let w = b.len();
                Tensor::new(ta.shape(), a.iter().enumerate().map(|(i, &x)| f(x, b[i % w])).collect())
            }
            Bcast::Left => {
                let w = a.len();
                Tensor::new(tb.shape(), b.iter().enumerate().map(|(i, &y)| f(a[i % w], y)).collect())
            }
        }
        .expect("broadcast shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let bcast = self.bcast("add", ia, ib)?;
        let v = self.elementwise(ia, ib, bcast, |x, y| x + y);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Record::Add { a: ia, b: ib, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let bcast = self.bcast("sub", ia, ib)?;
        let v = self.elementwise(ia, ib, bcast, |x, y| x - y);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Record::Sub { a: ia, b: ib, bcast }, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let bcast = self.bcast("hadamard", ia, ib)?;
        let v = self.elementwise(ia, ib, bcast, |x, y| x * y);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Record::Hadamard { a: ia, b: ib, bcast }, rg))
    }

    fn channel_vector(&self, op: &'static str, ix: usize, iv: usize) -> Result<usize> {
        let (sx, sv) = (self.nodes[ix].value.shape(), self.nodes[iv].value.shape());
        match (sx.last(), sv) {
            (Some(&d), [n]) if d == *n => Ok(d),
            _ => Err(Error::ShapeMismatch { op, lhs: sx.to_vec(), rhs: sv.to_vec() }),
        }
    }

    /// Adds a per-channel vector to every row of the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let d = self.channel_vector("add_bias", ix, ib)?;
        let b = self.nodes[ib].value.data();
        let xv = &self.nodes[ix].value;
        let v = Tensor::new(xv.shape(), xv.data().iter().enumerate().map(|(i, &x)| x + b[i % d]).collect())?;
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(v, Record::AddBias { x: ix, bias: ib }, rg))
    }

    /// Multiplies every row of the last dimension by a per-channel vector.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(scale)?);
        let d = self.channel_vector("mul_channel", ix, is)?;
        let s = self.nodes[is].value.data();
        let xv = &self.nodes[ix].value;
        let v = Tensor::new(xv.shape(), xv.data().iter().enumerate().map(|(i, &x)| x * s[i % d]).collect())?;
        let rg = self.rg(&[ix, is]);
        Ok(self.push(v, Record::MulChannel { x: ix, scale: is }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(|e| if e > S::zero() { e } else { S::zero() });
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Record::Relu { x: ix }, rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(|e| e * c);
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Record::Scale { x: ix, c }, rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(|e| e * e);
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Record::Square { x: ix }, rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Record::Sum { x: ix }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if t.numel() == 0 {
            return Err(Error::Degenerate("mean of empty tensor".into()));
        }
        let s = t.data().iter().fold(S::zero(), |acc, &v| acc + v) / S::of(t.numel() as f64);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Record::Mean { x: ix }, rg))
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let v = transpose_last2(t).ok_or_else(|| Error::ShapeMismatch {
            op: "transpose",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })?;
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Record::Transpose { x: ix }, rg))
    }

    /// Concatenates along the last dimension.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_channels of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: first.clone(), rhs: s.to_vec() });
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let w = t.shape()[t.rank() - 1];
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(shape, data)?, Record::Concat { parts: idx }, rg))
    }

    /// Row softmax of a square matrix restricted to `mask`; masked-out
    /// entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] || mask.len() != t.numel() {
            return Err(Error::ShapeMismatch { op: "masked_softmax", lhs: s.to_vec(), rhs: vec![mask.len()] });
        }
        let n = s[0];
        let mut out = vec![S::zero(); n * n];
        for i in 0..n {
            let row = &t.data()[i * n..(i + 1) * n];
            let m = &mask[i * n..(i + 1) * n];
            let mut max = S::neg_infinity();
            for j in 0..n {
                if m[j] {
                    max = max.max(row[j]);
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::EmptyRow { row: i });
            }
            let mut total = S::zero();
            for j in 0..n {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= total;
            }
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new([n, n], out)?, Record::MaskedSoftmax { x: ix, mask }, rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let w = *t.shape().last().ok_or_else(|| Error::InvalidArgument("softmax of rank-0".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Record::SoftmaxLast { x: ix }, rg))
    }

    /// Places the entries of a vector at flat `positions` of a zero tensor of
    /// `shape`.
    pub fn scatter(&mut self, x: Var, positions: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let total: usize = shape.iter().product();
        if t.numel() != positions.len() || positions.iter().any(|&p| p >= total) {
            return Err(Error::ShapeMismatch { op: "scatter", lhs: t.shape().to_vec(), rhs: shape.to_vec() });
        }
        let mut out = vec![S::zero(); total];
        for (&p, &v) in positions.iter().zip(t.data()) {
            out[p] = v;
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(shape, out)?, Record::Scatter { x: ix, positions }, rg))
    }

    /// Batch normalization with batch statistics pooled over every axis but
    /// the last. Returns the statistics for running-average bookkeeping.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let d = self.channel_vector("batch_norm", ix, ig)?;
        self.channel_vector("batch_norm", ix, ib)?;
        let xv = &self.nodes[ix].value;
        let rows = xv.numel() / d.max(1);
        if rows < 2 {
            return Err(Error::InsufficientSamples(rows));
        }
        let xs = xv.data();
        let inv_n = S::one() / S::of(rows as f64);
        let mut mean = vec![S::zero(); d];
        for r in 0..rows {
            for c in 0..d {
                mean[c] += xs[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![S::zero(); d];
        for r in 0..rows {
            for c in 0..d {
                let e = xs[r * d + c] - mean[c];
                var[c] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = vec![S::zero(); xs.len()];
        for r in 0..rows {
            for c in 0..d {
                let h = (xs[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let stats = BatchStats { mean, var, count: rows };
        let rg = self.rg(&[ix, ig, ib]);
        let record = if rg {
            Record::BatchNorm { x: ix, gamma: ig, beta: ib, xhat: Tensor::new(shape.clone(), xhat)?, inv_std }
        } else {
            Record::Leaf
        };
        Ok((self.push(Tensor::new(shape, out)?, record, rg), stats))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Back-propagates from a one-element output. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<Gradients<S>> {
        let io = self.check(output)?;
        let out_shape = self.nodes[io].value.shape().to_vec();
        if self.nodes[io].value.numel() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; io + 1];
        grads[io] = Some(Tensor::ones(out_shape));
        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Record::Leaf = self.nodes[i].record {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut map = BTreeMap::new();
        for (i, g) in self.leaf_grads.iter().enumerate() {
            if let Some(g) = g {
                map.insert(Var { tape: self.id, index: i }, g.clone());
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let gd = g.data();
        match &nodes[i].record {
            Record::Leaf => {}
            Record::MatMul { a, b, mode, m, k, n, batch } => {
                let (a, b, m, k, n, batch) = (*a, *b, *m, *k, *n, *batch);
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                match mode {
                    MatMulMode::Plain | MatMulMode::BatchedLhs => {
                        let rows = if *mode == MatMulMode::Plain { m } else { batch * m };
                        if wants(a) {
                            let buf = slot(grads, a, nodes[a].value.shape());
                            gemm(MatRef::new(gd, rows, n), MatRef::new(bv, k, n).t(), buf.data_mut(), true);
                        }
                        if wants(b) {
                            let buf = slot(grads, b, nodes[b].value.shape());
                            gemm(MatRef::new(av, rows, k).t(), MatRef::new(gd, rows, n), buf.data_mut(), true);
                        }
                    }
                    MatMulMode::SharedLhs => {
                        if wants(a) {
                            let buf = slot(grads, a, nodes[a].value.shape());
                            for bi in 0..batch {
                                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                                let xb = &bv[bi * k * n..(bi + 1) * k * n];
                                gemm(MatRef::new(gb, m, n), MatRef::new(xb, k, n).t(), buf.data_mut(), true);
                            }
                        }
                        if wants(b) {
                            let buf = slot(grads, b, nodes[b].value.shape());
                            for bi in 0..batch {
                                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                                let out = &mut buf.data_mut()[bi * k * n..(bi + 1) * k * n];
                                gemm(MatRef::new(av, m, k).t(), MatRef::new(gb, m, n), out, true);
                            }
                        }
                    }
                    MatMulMode::Batched => {
                        if wants(a) {
                            let buf = slot(grads, a, nodes[a].value.shape());
                            for bi in 0..batch {
                                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                                let xb = &bv[bi * k * n..(bi + 1) * k * n];
                                let out = &mut buf.data_mut()[bi * m * k..(bi + 1) * m * k];
                                gemm(MatRef::new(gb, m, n), MatRef::new(xb, k, n).t(), out, true);
                            }
                        }
                        if wants(b) {
                            let buf = slot(grads, b, nodes[b].value.shape());
                            for bi in 0..batch {
                                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                                let ab = &av[bi * m * k..(bi + 1) * m * k];
                                let out = &mut buf.data_mut()[bi * k * n..(bi + 1) * k * n];
                                gemm(MatRef::new(ab, m, k).t(), MatRef::new(gb, m, n), out, true);
                            }
                        }
                    }
                }
            }
            Record::Add { a, b, bcast } => {
                accumulate_bcast(grads, nodes, *a, *b, *bcast, gd, |g, _, _| g, |g, _, _| g);
            }
            Record::Sub { a, b, bcast } => {
                accumulate_bcast(grads, nodes, *a, *b, *bcast, gd, |g, _, _| g, |g, _, _| -g);
            }
            Record::Hadamard { a, b, bcast } => {
                accumulate_bcast(grads, nodes, *a, *b, *bcast, gd, |g, _, y| g * y, |g, x, _| g * x);
            }
            Record::AddBias { x, bias } => {
                if wants(*x) {
                    let buf = slot(grads, *x, nodes[*x].value.shape());
                    add_into(buf.data_mut(), gd);
                }
                if wants(*bias) {
                    let d = nodes[*bias].value.numel();
                    let buf = slot(grads, *bias, nodes[*bias].value.shape());
                    let bd = buf.data_mut();
                    for (j, &v) in gd.iter().enumerate() {
                        bd[j % d] += v;
                    }
                }
            }
            Record::MulChannel { x, scale } => {
                let d = nodes[*scale].value.numel();
                let sv = nodes[*scale].value.data();
                let xv = nodes[*x].value.data();
                if wants(*x) {
                    let buf = slot(grads, *x, nodes[*x].value.shape());
                    for (j, (o, &v)) in buf.data_mut().iter_mut().zip(gd).enumerate() {
                        *o += v * sv[j % d];
                    }
                }
                if wants(*scale) {
                    let buf = slot(grads, *scale, nodes[*scale].value.shape());
                    let bd = buf.data_mut();
                    for (j, &v) in gd.iter().enumerate() {
                        bd[j % d] += v * xv[j];
                    }
                }
            }
            Record::Relu { x } => {
                let xv = nodes[*x].value.data();
                let buf = slot(grads, *x, nodes[*x].value.shape());
                for ((o, &v), &xi) in buf.data_mut().iter_mut().zip(gd).zip(xv) {
                    if xi > S::zero() {
                        *o += v;
                    }
                }
            }
            Record::Scale { x, c } => {
                let buf = slot(grads, *x, nodes[*x].value.shape());
                for (o, &v) in buf.data_mut().iter_mut().zip(gd) {
                    *o += v * *c;
                }
            }
            Record::Square { x } => {
                let xv = nodes[*x].value.data();
                let two = S::of(2.0);
                let buf = slot(grads, *x, nodes[*x].value.shape());
                for ((o, &v), &xi) in buf.data_mut().iter_mut().zip(gd).zip(xv) {
                    *o += two * xi * v;
                }
            }
            Record::Sum { x } => {
                let buf = slot(grads, *x, nodes[*x].value.shape());
                buf.data_mut().iter_mut().for_each(|o| *o += gd[0]);
            }
            Record::Mean { x } => {
                let n = S::of(nodes[*x].value.numel() as f64);
                let buf = slot(grads, *x, nodes[*x].value.shape());
                buf.data_mut().iter_mut().for_each(|o| *o += gd[0] / n);
            }
            Record::Transpose { x } => {
                let back = transpose_last2(g).expect("transpose shape");
                let buf = slot(grads, *x, nodes[*x].value.shape());
                add_into(buf.data_mut(), back.data());
            }
            Record::Concat { parts } => {
                let out_w = *g.shape().last().unwrap();
                let rows = g.numel() / out_w.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *nodes[p].value.shape().last().unwrap();
                    if wants(p) {
                        let buf = slot(grads, p, nodes[p].value.shape());
                        let bd = buf.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                bd[r * w + c] += gd[r * out_w + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Record::MaskedSoftmax { x, mask } => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.shape()[0];
                let buf = slot(grads, *x, nodes[*x].value.shape());
                let bd = buf.data_mut();
                for r in 0..n {
                    let mut dot = S::zero();
                    for c in 0..n {
                        dot += y[r * n + c] * gd[r * n + c];
                    }
                    for c in 0..n {
                        if mask[r * n + c] {
                            bd[r * n + c] += y[r * n + c] * (gd[r * n + c] - dot);
                        }
                    }
                }
            }
            Record::SoftmaxLast { x } => {
                let y = nodes[i].value.data();
                let w = *nodes[i].value.shape().last().unwrap();
                let buf = slot(grads, *x, nodes[*x].value.shape());
                let bd = buf.data_mut();
                for r in 0..y.len() / w {
                    let row = r * w..(r + 1) * w;
                    let dot = y[row.clone()].iter().zip(&gd[row.clone()]).fold(S::zero(), |a, (&p, &q)| a + p * q);
                    for j in row {
                        bd[j] += y[j] * (gd[j] - dot);
                    }
                }
            }
            Record::Scatter { x, positions } => {
                let buf = slot(grads, *x, nodes[*x].value.shape());
                for (o, &p) in buf.data_mut().iter_mut().zip(positions.iter()) {
                    *o += gd[p];
                }
            }
            Record::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let d = inv_std.len();
                let rows = gd.len() / d;
                let hd = xhat.data();
                let gv = nodes[*gamma].value.data();
                let mut sum_g = vec![S::zero(); d];
                let mut sum_gh = vec![S::zero(); d];
                for r in 0..rows {
                    for c in 0..d {
                        sum_g[c] += gd[r * d + c];
                        sum_gh[c] += gd[r * d + c] * hd[r * d + c];
                    }
                }
                if wants(*beta) {
                    let buf = slot(grads, *beta, nodes[*beta].value.shape());
                    add_into(buf.data_mut(), &sum_g);
                }
                if wants(*gamma) {
                    let buf = slot(grads, *gamma, nodes[*gamma].value.shape());
                    add_into(buf.data_mut(), &sum_gh);
                }
                if wants(*x) {
                    let nr = S::of(rows as f64);
                    let buf = slot(grads, *x, nodes[*x].value.shape());
                    let bd = buf.data_mut();
                    for r in 0..rows {
                        for c in 0..d {
                            let j = r * d + c;
                            // dx = γ·σ⁻¹/n · (n·g − Σg − x̂·Σ(g·x̂))
                            bd[j] += gv[c] * inv_std[c] / nr * (nr * gd[j] - sum_g[c] - hd[j] * sum_gh[c]);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'g, S: Scalar>(grads: &'g mut [Option<Tensor<S>>], j: usize, shape: &[usize]) -> &'g mut Tensor<S> {
    grads[j].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_bcast<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    nodes: &[Node<S>],
    a: usize,
    b: usize,
    bcast: Bcast,
    gd: &[S],
    da: impl Fn(S, S, S) -> S,
    db: impl Fn(S, S, S) -> S,
) {
    let av = nodes[a].value.data();
    let bv = nodes[b].value.data();
    // index into each operand for output position j
    let (wa, wb) = match bcast {
        Bcast::Same => (usize::MAX, usize::MAX),
        Bcast::Right => (usize::MAX, bv.len()),
        Bcast::Left => (av.len(), usize::MAX),
    };
    let ia = |j: usize| if wa == usize::MAX { j } else { j % wa };
    let ib = |j: usize| if wb == usize::MAX { j } else { j % wb };
    if nodes[a].requires_grad {
        let buf = slot(grads, a, nodes[a].value.shape());
        let bd = buf.data_mut();
        for (j, &g) in gd.iter().enumerate() {
            bd[ia(j)] += da(g, av[ia(j)], bv[ib(j)]);
        }
    }
    if nodes[b].requires_grad {
        let buf = slot(grads, b, nodes[b].value.shape());
        let bd = buf.data_mut();
        for (j, &g) in gd.iter().enumerate() {
            bd[ib(j)] += db(g, av[ia(j)], bv[ib(j)]);
        }
    }
}

fn transpose_last2<S: Scalar>(t: &Tensor<S>) -> Option<Tensor<S>> {
    let s = t.shape();
    let (batch, r, c) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return None,
    };
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        let base = b * r * c;
        for j in 0..c {
            for i in 0..r {
                out.push(src[base + i * c + j]);
            }
        }
    }
    let shape = if s.len() == 2 { vec![c, r] } else { vec![batch, c, r] };
    Tensor::new(shape, out).ok()
}
