use super::gemm::{gemm, Layout};
use super::{gelu, sigmoid, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for the `[b*s, h*d] <-> [b*h, s, d]` head permutation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
pub(crate) enum Op<T: Element> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Shift { x: Var },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Gather { table: Var, ids: Vec<usize> },
    SplitHeads { x: Var, dims: HeadDims },
    MergeHeads { x: Var, dims: HeadDims },
    RepeatEach { x: Var, times: usize },
    Column { x: Var, index: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A tape of executed operations. Nodes are appended in execution order, so
/// the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) leaf_grads: Vec<Option<Vec<T>>>,
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    LastAxis,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape matches value"))
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(t, Op::Leaf, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            Ok(Broadcast::LastAxis)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data: Vec<T> = match kind {
            Broadcast::Same => va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LastAxis => {
                let w = vb.len();
                va.data()
                    .chunks_exact(w)
                    .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                    .collect()
            }
        };
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            T::zero(),
            &mut c,
        );
        let out = Tensor::new(vec![m, n], c)?;
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]`, or with `[g, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        let mut c = vec![T::zero(); g * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    Layout::row_major(k),
                    &db[i * k * n..(i + 1) * k * n],
                    lb,
                    T::zero(),
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(vec![g, m, n], c)?;
        self.push("batch_matmul", out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Elementwise sum; `b` may be a vector broadcast over the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product; `b` may be a vector broadcast over the last axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let c = T::lit(f64::from(c));
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: f32) -> Result<Var> {
        let c = T::lit(f64::from(c));
        self.unary("shift", x, |v| v + c, Op::Shift { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let (lo, hi) = (T::lit(f64::from(lo)), T::lit(f64::from(hi)));
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let w = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [w] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let vg = self.value(gain).data();
        let vb = self.value(bias).data();
        let rows = vx.rows();
        let eps = T::lit(f64::from(eps));
        let width = T::lit(w as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / width;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                data[r * w + j] = h * vg[j] + vb[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    /// Mean over rows of `-log softmax(logits)[target]`; `logits` is `[n, c]`
    /// (or any shape, rows taken over the last axis) with one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vx = self.value(logits);
        let c = vx.last_dim();
        let rows = vx.rows();
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vx.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let mut probs = vx.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            total += (lse - row[t]).widen();
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(T::lit(total / rows as f64));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", out, op, &[logits])
    }

    /// Row lookup: `table` is `[v, e]`, result is `[ids.len(), e]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::contract("gather needs a 2-D table"));
        }
        let (v, e) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&vt.data()[id * e..(id + 1) * e]);
        }
        let out = Tensor::new(vec![ids.len(), e], data)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", out, op, &[table])
    }

    /// `[batch*seq, heads*head_dim] -> [batch*heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 2 || s[0] != batch * seq || !s[1].is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "split_heads",
                lhs: s.to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dims = HeadDims {
            batch,
            seq,
            heads,
            head_dim: s[1] / heads,
        };
        let data = permute_split(vx.data(), dims);
        let out = Tensor::new(vec![batch * heads, seq, dims.head_dim], data)?;
        self.push("split_heads", out, Op::SplitHeads { x, dims }, &[x])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || !s[0].is_multiple_of(batch) {
            return Err(Error::Dimension {
                op: "merge_heads",
                lhs: s.to_vec(),
                rhs: vec![batch],
            });
        }
        let dims = HeadDims {
            batch,
            seq: s[1],
            heads: s[0] / batch,
            head_dim: s[2],
        };
        let data = permute_merge(vx.data(), dims);
        let out = Tensor::new(vec![batch * dims.seq, dims.heads * dims.head_dim], data)?;
        self.push("merge_heads", out, Op::MergeHeads { x, dims }, &[x])
    }

    /// Repeats each entry of a vector `times` times: `[n] -> [n*times]`.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 1 || times == 0 {
            return Err(Error::contract("repeat_each needs a vector and times >= 1"));
        }
        let data = vx
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let out = Tensor::vector(data);
        self.push("repeat_each", out, Op::RepeatEach { x, times }, &[x])
    }

    /// Picks one index of the last axis, dropping that axis.
    pub fn column(&mut self, x: Var, index: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if index >= c {
            return Err(Error::Index {
                op: "column",
                index,
                len: c,
            });
        }
        let data: Vec<T> = vx.data().chunks_exact(c).map(|r| r[index]).collect();
        let shape = if vx.shape().len() > 1 {
            vx.shape()[..vx.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(shape, data)?;
        self.push("column", out, Op::Column { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v.widen()).sum();
        self.push("sum", Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s: f64 = vx.data().iter().map(|&v| v.widen()).sum();
        let out = Tensor::scalar(T::lit(s / vx.len() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn permute_split<T: Element>(src: &[T], d: HeadDims) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let width = d.heads * d.head_dim;
    for b in 0..d.batch {
        for s in 0..d.seq {
            let row = &src[(b * d.seq + s) * width..(b * d.seq + s + 1) * width];
            for h in 0..d.heads {
                let dst = ((b * d.heads + h) * d.seq + s) * d.head_dim;
                out[dst..dst + d.head_dim]
                    .copy_from_slice(&row[h * d.head_dim..(h + 1) * d.head_dim]);
            }
        }
    }
    out
}

pub(crate) fn permute_merge<T: Element>(src: &[T], d: HeadDims) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let width = d.heads * d.head_dim;
    for b in 0..d.batch {
        for s in 0..d.seq {
            let row = &mut out[(b * d.seq + s) * width..(b * d.seq + s + 1) * width];
            for h in 0..d.heads {
                let at = ((b * d.heads + h) * d.seq + s) * d.head_dim;
                row[h * d.head_dim..(h + 1) * d.head_dim]
                    .copy_from_slice(&src[at..at + d.head_dim]);
            }
        }
    }
    out
}
