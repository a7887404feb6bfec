//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable once produced; [`Graph::backward`] walks the tape in reverse and
//! consumes it. Every op checks that its output is finite, so a NaN surfaces
//! at the op that produced it rather than at the loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::attention::{self, AttnMask};
use crate::numerics::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Axpby {
        a: Var,
        b: Var,
        alpha: f64,
        beta: f64,
    },
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    MatMul(Var, Var),
    Silu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Arc<AttnMask>,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    IndexAddRows {
        x: Var,
        idx: Arc<[usize]>,
        upd: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode computation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

/// Parameter handles bound into a graph, looked up by path.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }
}

fn row_len(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

fn rows(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("graph already consumed by backward()"));
        }
        if !value.is_finite() {
            let what = format!("{:?}", std::mem::discriminant(&op));
            value.ensure_finite(&format!("op {what}"))?;
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Record a named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        let v = self.push(t.clone(), Op::Param)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Bind every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.param(name, t)?);
        }
        Ok(Bound { vars })
    }

    /// Bind every tensor of `params` as a constant (inference, frozen models).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.constant(t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Copy of a value with no gradient path back to its producers.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// `alpha * a + beta * b`.
    pub fn axpby(&mut self, a: Var, b: Var, alpha: f64, beta: f64) -> Result<Var> {
        self.binary_same(a, b, "axpby")?;
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| alpha * x + beta * y)?;
        self.push(out, Op::Axpby { a, b, alpha, beta })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).add(c)?;
        self.push(out, Op::AddConst(a))
    }

    /// Add a vector to every row: `x[.., D] + b[D]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let d = row_len(xs);
        if bs.len() != 1 || bs[0] != d {
            return Err(Error::dim(format!("add_row: {xs:?} + {bs:?}")));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    /// Add an `[R, D]` block to every consecutive group of `R` rows of `x[N, D]`.
    pub fn add_tiled(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xs, rs) = (self.shape(x).to_vec(), self.shape(r).to_vec());
        let block = self.value(r).len();
        if rs.len() != 2 || row_len(&xs) != rs[1] || self.value(x).len() % block != 0 {
            return Err(Error::dim(format!("add_tiled: {xs:?} + {rs:?}")));
        }
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        for tile in out.data_mut().chunks_exact_mut(block) {
            for (o, &rr) in tile.iter_mut().zip(&rv) {
                *o += rr;
            }
        }
        self.push(out, Op::AddTiled(x, r))
    }

    /// `x[.., K] @ w[K, N]`, treating all leading axes of `x` as rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || row_len(&xs) != ws[0] {
            return Err(Error::dim(format!("matmul: {xs:?} @ {ws:?}")));
        }
        let (m, k, n) = (rows(&xs), ws[0], ws[1]);
        let out = matmul_nn(self.value(x).data(), self.value(w).data(), m, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::MatMul(x, w))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = row_len(&xs);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: {xs:?} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let n = rows(&xs);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; xv.len()];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// `[batch * L, heads * D]` -> `[batch, heads, L, D]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] % batch != 0 || xs[1] % heads != 0 {
            return Err(Error::dim(format!(
                "split_heads: {xs:?} into batch {batch}, heads {heads}"
            )));
        }
        let (l, d) = (xs[0] / batch, xs[1] / heads);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for i in 0..l {
                for h in 0..heads {
                    let s = ((b * l + i) * heads + h) * d;
                    let t = ((b * heads + h) * l + i) * d;
                    out[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let t = Tensor::new(vec![batch, heads, l, d], out)?;
        self.push(t, Op::SplitHeads { x, batch, heads })
    }

    /// `[batch, heads, L, D]` -> `[batch * L, heads * D]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("merge_heads: {xs:?}")));
        }
        let (batch, heads, l, d) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..l {
                    let s = ((b * heads + h) * l + i) * d;
                    let t = ((b * l + i) * heads + h) * d;
                    out[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let t = Tensor::new(vec![batch * l, heads * d], out)?;
        self.push(t, Op::MergeHeads(x))
    }

    /// Masked scaled-dot-product attention over `[B, H, L, D]` operands.
    ///
    /// `bias`, when given, is an `[H, buckets]` table indexed by the mask's
    /// per-pair bucket ids and added to the logits of permitted pairs.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Arc<AttnMask>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (out, probs) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            mask,
            bias.map(|b| self.value(b)),
        )?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                mask: Arc::clone(mask),
                probs,
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.iter().any(|&i| i >= xs[0]) || idx.is_empty() {
            return Err(Error::dim(format!("select_rows: {xs:?} at {idx:?}")));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        self.push(
            t,
            Op::SelectRows {
                x,
                idx: Arc::clone(idx),
            },
        )
    }

    /// Copy of `x` with `upd[r]` added to row `idx[r]`; other rows are untouched.
    pub fn index_add_rows(&mut self, x: Var, idx: &Arc<[usize]>, upd: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let us = self.shape(upd).to_vec();
        if xs.len() != 2
            || us.len() != 2
            || us[1] != xs[1]
            || us[0] != idx.len()
            || idx.iter().any(|&i| i >= xs[0])
        {
            return Err(Error::dim(format!(
                "index_add_rows: {xs:?} with {us:?} at {} rows",
                idx.len()
            )));
        }
        let d = xs[1];
        let mut out = self.value(x).clone();
        let u = self.value(upd).data();
        let od = out.data_mut();
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                od[i * d + j] += u[r * d + j];
            }
        }
        self.push(
            out,
            Op::IndexAddRows {
                x,
                idx: Arc::clone(idx),
                upd,
            },
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rank = self.shape(first).len();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} for rank {rank}")));
        }
        let mut shape = self.shape(first).to_vec();
        shape[axis] = 0;
        for &p in parts {
            let ps = self.shape(p);
            let agrees = ps.len() == rank
                && ps
                    .iter()
                    .zip(self.shape(first))
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::dim(format!(
                    "concat along {axis}: {ps:?} vs {:?}",
                    self.shape(first)
                )));
            }
            shape[axis] += ps[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let ps = self.shape(p);
                let block: usize = ps[axis..].iter().product();
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_outer(start, len)?;
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let neg = target.scale(-1.0);
        let d = self.add_const(x, &neg)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one gradient per entry of `params`; parameters that were never
    /// bound or that the loss does not depend on get zeros. The tape is
    /// consumed: a second call fails.
    pub fn backward(&mut self, loss: Var, params: &ParamSet) -> Result<BTreeMap<String, Tensor>> {
        if self.consumed {
            return Err(Error::contract(
                "backward() called twice on the same recorded forward pass",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads)?;
            // Params keep their gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Param) {
                grads[idx] = Some(gout);
            }
        }

        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        for (name, var) in &self.params {
            let Some(g) = grads[var.0].take() else {
                continue;
            };
            if let Some(slot) = out.get_mut(name) {
                let gt = Tensor::new(slot.shape().to_vec(), g)?;
                gt.ensure_finite(&format!("gradient of `{name}`"))?;
                *slot = gt;
            }
        }
        // Release the recorded values.
        self.nodes.clear();
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, self, *a, gout);
                accumulate(grads, self, *b, gout);
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                accumulate(grads, self, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gout.iter().zip(bv).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(grads, self, *a, &ga);
                accumulate(grads, self, *b, &gb);
            }
            Op::Axpby { a, b, alpha, beta } => {
                let ga: Vec<f64> = gout.iter().map(|g| g * alpha).collect();
                let gb: Vec<f64> = gout.iter().map(|g| g * beta).collect();
                accumulate(grads, self, *a, &ga);
                accumulate(grads, self, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gout.iter().map(|g| g * c).collect();
                accumulate(grads, self, *a, &ga);
            }
            Op::AddConst(a) | Op::Reshape(a) => accumulate(grads, self, *a, gout),
            Op::AddRow(x, b) => {
                accumulate(grads, self, *x, gout);
                let d = self.value(*b).len();
                let mut gb = vec![0.0; d];
                for row in gout.chunks_exact(d) {
                    for (s, g) in gb.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                accumulate(grads, self, *b, &gb);
            }
            Op::AddTiled(x, r) => {
                accumulate(grads, self, *x, gout);
                let block = self.value(*r).len();
                let mut gr = vec![0.0; block];
                for tile in gout.chunks_exact(block) {
                    for (s, g) in gr.iter_mut().zip(tile) {
                        *s += g;
                    }
                }
                accumulate(grads, self, *r, &gr);
            }
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = self.value(*x).len() / k;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if needs_grad(self, *x) {
                    let gx = matmul_nt(gout, wv, m, n, k);
                    accumulate(grads, self, *x, &gx);
                }
                if needs_grad(self, *w) {
                    let gw = matmul_tn(xv, gout, m, k, n);
                    accumulate(grads, self, *w, &gw);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = gout
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, self, *x, &gx);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = gout.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect();
                accumulate(grads, self, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let g = self.value(*gamma).data();
                let n = rstd.len();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; gout.len()];
                for r in 0..n {
                    let go = &gout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        gg[j] += go[j] * xh[j];
                        gb[j] += go[j];
                        let dxh = go[j] * g[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dxh = go[j] * g[j];
                        gx[r * d + j] =
                            rstd[r] * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                    }
                }
                accumulate(grads, self, *x, &gx);
                accumulate(grads, self, *gamma, &gg);
                accumulate(grads, self, *beta, &gb);
            }
            Op::SplitHeads { x, batch, heads } => {
                let os = self.value(Var(idx)).shape();
                let (l, d) = (os[2], os[3]);
                let mut gx = vec![0.0; gout.len()];
                for b in 0..*batch {
                    for i in 0..l {
                        for h in 0..*heads {
                            let s = ((b * l + i) * heads + h) * d;
                            let t = ((b * heads + h) * l + i) * d;
                            gx[s..s + d].copy_from_slice(&gout[t..t + d]);
                        }
                    }
                }
                accumulate(grads, self, *x, &gx);
            }
            Op::MergeHeads(x) => {
                let xs = self.shape(*x);
                let (batch, heads, l, d) = (xs[0], xs[1], xs[2], xs[3]);
                let mut gx = vec![0.0; gout.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..l {
                            let s = ((b * heads + h) * l + i) * d;
                            let t = ((b * l + i) * heads + h) * d;
                            gx[s..s + d].copy_from_slice(&gout[t..t + d]);
                        }
                    }
                }
                accumulate(grads, self, *x, &gx);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                mask,
                probs,
            } => {
                let g = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    mask,
                    bias.map(|b| self.value(b).shape()[1]),
                    probs,
                    gout,
                );
                accumulate(grads, self, *q, &g.dq);
                accumulate(grads, self, *k, &g.dk);
                accumulate(grads, self, *v, &g.dv);
                if let (Some(b), Some(db)) = (bias, g.dbias) {
                    accumulate(grads, self, *b, &db);
                }
            }
            Op::SelectRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += gout[r * d + j];
                    }
                }
                accumulate(grads, self, *x, &gx);
            }
            Op::IndexAddRows { x, idx, upd } => {
                accumulate(grads, self, *x, gout);
                let d = self.shape(*x)[1];
                let mut gu = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    gu.extend_from_slice(&gout[i * d..(i + 1) * d]);
                }
                accumulate(grads, self, *upd, &gu);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = self.shape(parts[0])[..*axis].iter().product();
                let blocks: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.shape(p)[*axis..].iter().product())
                    .collect();
                let stride: usize = blocks.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !needs_grad(self, p) {
                        continue;
                    }
                    let off: usize = blocks[..pi].iter().sum();
                    let mut gp = Vec::with_capacity(outer * blocks[pi]);
                    for o in 0..outer {
                        let s = o * stride + off;
                        gp.extend_from_slice(&gout[s..s + blocks[pi]]);
                    }
                    accumulate(grads, self, p, &gp);
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).len()];
                let off = start * inner;
                gx[off..off + gout.len()].copy_from_slice(gout);
                accumulate(grads, self, *x, &gx);
            }
            Op::SumAll(x) => {
                let gx = vec![gout[0]; self.value(*x).len()];
                accumulate(grads, self, *x, &gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gx = vec![gout[0] / n as f64; n];
                accumulate(grads, self, *x, &gx);
            }
        }
        Ok(())
    }
}

fn needs_grad(g: &Graph, v: Var) -> bool {
    !matches!(g.nodes[v.0].op, Op::Leaf)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], g: &Graph, v: Var, delta: &[f64]) {
    if !needs_grad(g, v) {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// `a[m,k] @ b[k,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,n] @ b[k,n]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(arow, brow);
        }
    }
    out
}

/// `a[m,k]^T @ b[m,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
