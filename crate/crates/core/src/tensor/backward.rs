//! Vector-Jacobian products for every [`Op`].

use super::gemm::{gemm, Layout};
use super::graph::{permute_merge, permute_split, Broadcast, Graph, Op, Var};
use super::{gelu_grad, Element};
use crate::error::{Error, Result};

impl<T: Element> Graph<T> {
    /// Accumulates d`loss`/d`leaf` into every leaf that requires grad.
    /// Gradients add up across repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.vjp(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs given its output grad.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    let vb = self.value(b).data();
                    gemm(m, n, k, g, Layout::row_major(n), vb, Layout::transposed(n), T::zero(), &mut ga);
                    res.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); k * n];
                    let va = self.value(a).data();
                    gemm(k, m, n, va, Layout::transposed(k), g, Layout::row_major(n), T::zero(), &mut gb);
                    res.push((b, gb));
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.value(a).shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let va = self.value(a).data();
                let vb = self.value(b).data();
                if self.wants(a) {
                    // dA = dC · B^T  (or dC · B when B was used transposed)
                    let mut ga = vec![T::zero(); bs * m * k];
                    let lb = if trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    for j in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[j * m * n..(j + 1) * m * n],
                            Layout::row_major(n),
                            &vb[j * k * n..(j + 1) * k * n],
                            lb,
                            T::zero(),
                            &mut ga[j * m * k..(j + 1) * m * k],
                        );
                    }
                    res.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for j in 0..bs {
                        let ga_slice = &va[j * m * k..(j + 1) * m * k];
                        let g_slice = &g[j * m * n..(j + 1) * m * n];
                        let dst = &mut gb[j * k * n..(j + 1) * k * n];
                        if trans_b {
                            // B is [n, k]: dB = dC^T · A
                            gemm(n, m, k, g_slice, Layout::transposed(n), ga_slice, Layout::row_major(k), T::zero(), dst);
                        } else {
                            // B is [k, n]: dB = A^T · dC
                            gemm(k, m, n, ga_slice, Layout::transposed(k), g_slice, Layout::row_major(n), T::zero(), dst);
                        }
                    }
                    res.push((b, gb));
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if self.wants(a) {
                    res.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    let mut gb = self.reduce_to(a, b, g.to_vec());
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((b, gb));
                }
            }
            &Op::Mul { a, b } => {
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let kind = self.broadcast_kind("mul", a, b).expect("validated in forward");
                let w = vb.len();
                if self.wants(a) {
                    let ga = match kind {
                        Broadcast::Same => g.iter().zip(vb).map(|(&x, &y)| x * y).collect(),
                        Broadcast::LastAxis => g
                            .chunks_exact(w)
                            .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x * y))
                            .collect(),
                    };
                    res.push((a, ga));
                }
                if self.wants(b) {
                    let prod: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    res.push((b, self.reduce_to(a, b, prod)));
                }
            }
            &Op::Scale { x, c } => res.push((x, g.iter().map(|&v| v * c).collect())),
            &Op::Shift { x } | &Op::Reshape(x) => res.push((x, g.to_vec())),
            &Op::Relu(x) => {
                let vx = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((x, gx));
            }
            &Op::Gelu(x) => {
                let vx = self.value(x).data();
                res.push((x, g.iter().zip(vx).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()));
            }
            &Op::Sigmoid(x) => {
                res.push((x, g.iter().zip(out).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()));
            }
            &Op::Clamp { x, lo, hi } => {
                let vx = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { T::zero() })
                    .collect();
                res.push((x, gx));
            }
            &Op::Softmax(x) => {
                let w = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks_exact(w).zip(out.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((x, gx));
            }
            &Op::LogSoftmax(x) => {
                let w = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks_exact(w).zip(out.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..w {
                        dst[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                res.push((x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = node.value.last_dim();
                let vg = self.value(*gain).data();
                if self.wants(*x) {
                    let width = T::lit(w as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..w {
                            let dh = gr[j] * vg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= width;
                        mean_dh_h /= width;
                        for j in 0..w {
                            let dh = gr[j] * vg[j];
                            gx[r * w + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.wants(*gain) {
                    let mut gg = vec![T::zero(); w];
                    for (gr, hr) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    res.push((*gain, gg));
                }
                if self.wants(*bias) {
                    res.push((*bias, column_sums(g, w)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= T::one();
                }
                gx.iter_mut().for_each(|v| *v *= scale);
                res.push((*logits, gx));
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let e = vt.shape()[1];
                let mut gt = vec![T::zero(); vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * e..(id + 1) * e];
                    dst.iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(a, &b)| *a += b);
                }
                res.push((*table, gt));
            }
            &Op::SplitHeads { x, dims } => res.push((x, permute_merge(g, dims))),
            &Op::MergeHeads { x, dims } => res.push((x, permute_split(g, dims))),
            &Op::RepeatEach { x, times } => {
                res.push((x, g.chunks_exact(times).map(|c| c.iter().copied().sum()).collect()));
            }
            &Op::Column { x, index } => {
                let c = self.value(x).last_dim();
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (r, gv) in g.iter().enumerate() {
                    gx[r * c + index] = *gv;
                }
                res.push((x, gx));
            }
            &Op::Sum(x) => res.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                res.push((x, vec![g[0] / T::lit(n as f64); n]));
            }
        }
        res
    }

    /// Sums a gradient shaped like `a` down to the shape of `b`.
    fn reduce_to(&self, a: Var, b: Var, g: Vec<T>) -> Vec<T> {
        if self.value(a).shape() == self.value(b).shape() {
            g
        } else {
            column_sums(&g, self.value(b).len())
        }
    }
}

fn column_sums<T: Element>(g: &[T], w: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); w];
    for row in g.chunks_exact(w) {
        acc.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    acc
}
