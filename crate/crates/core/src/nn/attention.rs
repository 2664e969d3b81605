//! Multi-head scaled dot-product attention.

use super::param::{Ctx, Init, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Real, Val};

/// Projection weights of one attention layer. `dim` must be divisible by
/// `heads`.
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Per-head key/value projections, reusable across several query sets
/// attending to the same keys within one pass.
pub struct KvProj {
    pub k_heads: Vec<Val>,
    pub v_heads: Vec<Val>,
}

/// Softmax weight matrices of one attention call, one `[q, k]` tensor per
/// head. Every row sums to 1.
pub struct AttnWeights {
    pub per_head: Vec<Val>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let mut w = |suffix: &str| {
            params.add(&format!("{name}.{suffix}.w"), vec![dim, dim], Init::Xavier)
        };
        let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
        let mut b = |suffix: &str| {
            params.add(&format!("{name}.{suffix}.b"), vec![dim], Init::Zeros)
        };
        let (bq, bk, bv, bo) = (b("q"), b("k"), b("v"), b("o"));
        Ok(MultiHeadAttention {
            heads,
            dim,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn project<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        x: Val,
        w: ParamId,
        b: ParamId,
    ) -> Result<Vec<Val>> {
        let wv = cx.p(w);
        let bv = cx.p(b);
        let proj = cx.tape.matmul(x, wv)?;
        let proj = cx.tape.add_row(proj, bv)?;
        let dh = self.dim / self.heads;
        (0..self.heads)
            .map(|h| cx.tape.narrow_cols(proj, h * dh, dh))
            .collect()
    }

    /// Projects keys and values once; `key` and `value` must have the same
    /// number of rows.
    pub fn project_kv<T: Real>(&self, cx: &mut Ctx<T>, key: Val, value: Val) -> Result<KvProj> {
        let (kn, kd) = shape2(cx, key)?;
        let (vn, _) = shape2(cx, value)?;
        if kn != vn {
            return Err(Error::Shape {
                op: "attention key/value rows",
                lhs: cx.tape.shape(key).to_vec(),
                rhs: cx.tape.shape(value).to_vec(),
            });
        }
        if kd != self.dim {
            return Err(Error::Shape {
                op: "attention key dim",
                lhs: cx.tape.shape(key).to_vec(),
                rhs: vec![kn, self.dim],
            });
        }
        Ok(KvProj {
            k_heads: self.project(cx, key, self.wk, self.bk)?,
            v_heads: self.project(cx, value, self.wv, self.bv)?,
        })
    }

    /// Attention with pre-projected keys/values. Returns the output and the
    /// per-head weight matrices.
    pub fn forward_kv<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        query: Val,
        kv: &KvProj,
    ) -> Result<(Val, AttnWeights)> {
        let (_, qd) = shape2(cx, query)?;
        if qd != self.dim {
            return Err(Error::Shape {
                op: "attention query dim",
                lhs: cx.tape.shape(query).to_vec(),
                rhs: vec![self.dim],
            });
        }
        let dh = self.dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q_heads = self.project(cx, query, self.wq, self.bq)?;
        let mut ctx_heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kt = cx.tape.transpose(kv.k_heads[h])?;
            let scores = cx.tape.matmul(q_heads[h], kt)?;
            let scores = cx.tape.scale(scores, scale);
            let attn = cx.tape.softmax(scores, 1)?;
            weights.push(attn);
            ctx_heads.push(cx.tape.matmul(attn, kv.v_heads[h])?);
        }
        let merged = cx.tape.concat_cols(&ctx_heads)?;
        let wo = cx.p(self.wo);
        let bo = cx.p(self.bo);
        let out = cx.tape.matmul(merged, wo)?;
        let out = cx.tape.add_row(out, bo)?;
        Ok((out, AttnWeights { per_head: weights }))
    }

    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        query: Val,
        key: Val,
        value: Val,
    ) -> Result<(Val, AttnWeights)> {
        let kv = self.project_kv(cx, key, value)?;
        self.forward_kv(cx, query, &kv)
    }
}

fn shape2<T: Real>(cx: &Ctx<T>, v: Val) -> Result<(usize, usize)> {
    let s = cx.tape.shape(v);
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "attention input rank",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok((s[0], s[1]))
}

/// Head-averaged attention weights as plain numbers, one row per query.
pub fn mean_head_weights<T: Real>(cx: &Ctx<T>, w: &AttnWeights) -> Vec<Vec<f64>> {
    let shape = cx.tape.shape(w.per_head[0]).to_vec();
    let (q, k) = (shape[0], shape[1]);
    let mut rows = vec![vec![0.0f64; k]; q];
    for &hv in &w.per_head {
        let data = cx.tape.data(hv);
        for r in 0..q {
            for c in 0..k {
                rows[r][c] += data[r * k + c].as_f64();
            }
        }
    }
    let hn = w.per_head.len() as f64;
    for row in &mut rows {
        row.iter_mut().for_each(|v| *v /= hn);
    }
    rows
}
