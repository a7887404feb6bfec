//! Masked scaled-dot-product attention kernel.

use crate::error::{Error, Result};
use crate::numerics::graph::dot;
use crate::numerics::tensor::Tensor;

/// Logit assigned to excluded pairs. `exp(MASKED_LOGIT - max)` underflows to
/// exactly zero, so excluded keys contribute nothing.
pub const MASKED_LOGIT: f64 = -1e9;

/// Boolean `[Lq, Lk]` attention predicate, optionally carrying a per-pair
/// bucket id used to index a learned logit-bias table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    lq: usize,
    lk: usize,
    allowed: Vec<bool>,
    buckets: Option<Vec<u8>>,
}

impl AttnMask {
    pub fn new(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != lq * lk {
            return Err(Error::dim(format!(
                "mask of {} entries for [{lq}, {lk}]",
                allowed.len()
            )));
        }
        if let Some(row) = (0..lq).find(|&i| !allowed[i * lk..(i + 1) * lk].iter().any(|&a| a)) {
            return Err(Error::DegenerateMask { row });
        }
        Ok(AttnMask {
            lq,
            lk,
            allowed,
            buckets: None,
        })
    }

    pub fn full(lq: usize, lk: usize) -> Self {
        AttnMask {
            lq,
            lk,
            allowed: vec![true; lq * lk],
            buckets: None,
        }
    }

    pub fn from_fn(lq: usize, lk: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..lq * lk).map(|p| f(p / lk, p % lk)).collect();
        Self::new(lq, lk, allowed)
    }

    pub fn with_buckets(mut self, buckets: Vec<u8>) -> Result<Self> {
        if buckets.len() != self.lq * self.lk {
            return Err(Error::dim(format!(
                "{} bucket ids for [{}, {}] mask",
                buckets.len(),
                self.lq,
                self.lk
            )));
        }
        self.buckets = Some(buckets);
        Ok(self)
    }

    pub fn lq(&self) -> usize {
        self.lq
    }

    pub fn lk(&self) -> usize {
        self.lk
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.lk + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn buckets(&self) -> Option<&[u8]> {
        self.buckets.as_deref()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Number of permitted pairs.
    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

fn check_operands(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Result<[usize; 5]> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 4 || ks.len() != 4 || vs.len() != 4 {
        return Err(Error::dim(format!(
            "attention operands must be rank 4, got {qs:?} {ks:?} {vs:?}"
        )));
    }
    let (b, h, lq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let lk = ks[2];
    if ks != [b, h, lk, d] || vs != [b, h, lk, d] {
        return Err(Error::dim(format!(
            "attention shapes q {qs:?} k {ks:?} v {vs:?} disagree"
        )));
    }
    if mask.lq != lq || mask.lk != lk {
        return Err(Error::dim(format!(
            "mask [{}, {}] for attention [{lq}, {lk}]",
            mask.lq, mask.lk
        )));
    }
    Ok([b, h, lq, lk, d])
}

/// Returns the output and the attention probabilities `[B, H, Lq, Lk]`.
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Vec<f64>)> {
    let [b, h, lq, lk, d] = check_operands(q, k, v, mask)?;
    if let Some(bt) = bias {
        let bs = bt.shape();
        let nb = mask.buckets.as_ref().map(|bk| bk.iter().copied().max().unwrap_or(0) as usize + 1);
        match nb {
            Some(nb) if bs.len() == 2 && bs[0] == h && bs[1] >= nb => {}
            _ => {
                return Err(Error::dim(format!(
                    "bias table {bs:?} incompatible with {h} heads and mask buckets"
                )))
            }
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * h * lq * d];
    let mut probs = vec![0.0; b * h * lq * lk];
    let mut logits = vec![0.0; lk];
    for bi in 0..b {
        for hi in 0..h {
            let bh = bi * h + hi;
            let bias_row = bias.map(|bt| &bt.data()[hi * bt.shape()[1]..(hi + 1) * bt.shape()[1]]);
            for i in 0..lq {
                let qrow = &qd[(bh * lq + i) * d..(bh * lq + i + 1) * d];
                let mrow = &mask.allowed[i * lk..(i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    let s = if mrow[j] {
                        let mut s = dot(qrow, &kd[(bh * lk + j) * d..(bh * lk + j + 1) * d]) * scale;
                        if let (Some(br), Some(bk)) = (bias_row, &mask.buckets) {
                            s += br[bk[i * lk + j] as usize];
                        }
                        s
                    } else {
                        MASKED_LOGIT
                    };
                    logits[j] = s;
                    max = max.max(s);
                }
                let prow = &mut probs[(bh * lq + i) * lk..(bh * lq + i + 1) * lk];
                let mut z = 0.0;
                for j in 0..lk {
                    let e = (logits[j] - max).exp();
                    prow[j] = e;
                    z += e;
                }
                let orow = &mut out[(bh * lq + i) * d..(bh * lq + i + 1) * d];
                for j in 0..lk {
                    prow[j] /= z;
                    let p = prow[j];
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vd[(bh * lk + j) * d..(bh * lk + j + 1) * d];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, h, lq, d], out)?, probs))
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
    bias_buckets: Option<usize>,
    probs: &[f64],
    gout: &[f64],
) -> AttnGrads {
    let qs = q.shape();
    let (b, h, lq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let lk = k.shape()[2];
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dbias = bias_buckets.map(|nb| vec![0.0; h * nb]);
    let mut dp = vec![0.0; lk];
    for bi in 0..b {
        for hi in 0..h {
            let bh = bi * h + hi;
            for i in 0..lq {
                let go = &gout[(bh * lq + i) * d..(bh * lq + i + 1) * d];
                let prow = &probs[(bh * lq + i) * lk..(bh * lq + i + 1) * lk];
                let mut c = 0.0;
                for j in 0..lk {
                    let p = prow[j];
                    if p == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vo = (bh * lk + j) * d;
                    dp[j] = dot(go, &vd[vo..vo + d]);
                    c += p * dp[j];
                    for (dvv, &g) in dv[vo..vo + d].iter_mut().zip(go) {
                        *dvv += p * g;
                    }
                }
                let qo = (bh * lq + i) * d;
                for j in 0..lk {
                    let p = prow[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - c);
                    if let (Some(db), Some(bk)) = (dbias.as_mut(), &mask.buckets) {
                        let nb = db.len() / h;
                        db[hi * nb + bk[i * lk + j] as usize] += ds;
                    }
                    let ko = (bh * lk + j) * d;
                    let s = ds * scale;
                    for t in 0..d {
                        dq[qo + t] += s * kd[ko + t];
                        dk[ko + t] += s * qd[qo + t];
                    }
                }
            }
        }
    }
    AttnGrads { dq, dk, dv, dbias }
}
