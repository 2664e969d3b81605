//! Forward constructors and backward rules for every tape operation.

use super::kernels::{
    gelu, gelu_deriv, matmul_into, softmax_fibers, stable_sigmoid, stable_softplus, transpose_into,
};
use super::{Op, Real, Tape, Val};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Val) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(T, T) -> T,
        tag: impl Fn(Val, Val) -> Op<T>,
    ) -> Result<Val> {
        self.same_shape(op, a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, tag(a, b), req))
    }

    fn unary(&mut self, a: Val, f: impl Fn(T) -> T, op: Op<T>) -> Val {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(data, shape, op, req)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn min_e(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("min_e", a, b, |x, y| x.min(y), Op::MinE)
    }

    pub fn max_e(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("max_e", a, b, |x, y| x.max(y), Op::MaxE)
    }

    pub fn neg(&mut self, a: Val) -> Val {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Val) -> Val {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Val) -> Val {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Val) -> Val {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Val) -> Val {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Val) -> Val {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn scale(&mut self, a: Val, c: T) -> Val {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Val, c: T) -> Val {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    /// Forward identity; backward multiplies the incoming gradient by
    /// `-strength`.
    pub fn grad_reverse(&mut self, a: Val, strength: T) -> Val {
        self.unary(a, |x| x, Op::GradReverse { src: a, strength })
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut data = vec![T::zero(); m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], Op::Matmul(a, b), req))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let (m, n) = self.dims2("transpose", a)?;
        let mut data = vec![T::zero(); m * n];
        transpose_into(&self.nodes[a.0].data, m, n, &mut data);
        let req = self.requires(a);
        Ok(self.push(data, vec![n, m], Op::Transpose(a), req))
    }

    /// `[n, d] + [d]` (or `[1, d]`) row broadcast; the one sanctioned
    /// broadcast form.
    pub fn add_row(&mut self, a: Val, row: Val) -> Result<Val> {
        let (n, d) = self.dims2("add_row", a)?;
        let row_shape = self.nodes[row.0].shape.clone();
        let ok = row_shape == [d] || row_shape == [1, d];
        if !ok {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![n, d],
                rhs: row_shape,
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        let r = &self.nodes[row.0].data;
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += r[j];
            }
        }
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(data, vec![n, d], Op::AddRow(a, row), req))
    }

    /// Row-wise inner products of two `[n, d]` tensors, yielding `[n]`.
    pub fn row_dot(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape("row_dot", a, b)?;
        let (n, d) = self.dims2("row_dot", a)?;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let data: Vec<T> = (0..n)
            .map(|i| {
                let mut s = T::zero();
                for j in 0..d {
                    s += ad[i * d + j] * bd[i * d + j];
                }
                s
            })
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![n], Op::RowDot(a, b), req))
    }

    /// Generic index map: `out[o] = src[map[o]]`, with `-1` producing zero.
    /// Backward scatter-adds. im2col, slicing and row gathers are built on
    /// this.
    pub fn gather(&mut self, src: Val, map: Vec<i64>, out_shape: Vec<usize>) -> Result<Val> {
        let numel: usize = out_shape.iter().product();
        if map.len() != numel {
            return Err(Error::Shape {
                op: "gather",
                lhs: vec![map.len()],
                rhs: out_shape,
            });
        }
        let src_len = self.nodes[src.0].data.len() as i64;
        if map.iter().any(|&ix| ix >= src_len || ix < -1) {
            return Err(Error::contract("gather index out of bounds"));
        }
        let sd = &self.nodes[src.0].data;
        let data: Vec<T> = map
            .iter()
            .map(|&ix| if ix < 0 { T::zero() } else { sd[ix as usize] })
            .collect();
        let req = self.requires(src);
        Ok(self.push(data, out_shape, Op::Gather { src, map }, req))
    }

    pub fn narrow_cols(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (n, d) = self.dims2("narrow_cols", a)?;
        if start + len > d {
            return Err(Error::contract(format!(
                "narrow_cols {start}..{} exceeds width {d}",
                start + len
            )));
        }
        let mut map = Vec::with_capacity(n * len);
        for i in 0..n {
            for j in 0..len {
                map.push((i * d + start + j) as i64);
            }
        }
        self.gather(a, map, vec![n, len])
    }

    pub fn narrow_rows(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (n, d) = self.dims2("narrow_rows", a)?;
        if start + len > n {
            return Err(Error::contract(format!(
                "narrow_rows {start}..{} exceeds height {n}",
                start + len
            )));
        }
        let map: Vec<i64> = ((start * d) as i64..((start + len) * d) as i64).collect();
        self.gather(a, map, vec![len, d])
    }

    pub fn gather_rows(&mut self, a: Val, rows: &[usize]) -> Result<Val> {
        let (n, d) = self.dims2("gather_rows", a)?;
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::contract("gather_rows index out of bounds"));
        }
        let mut map = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for j in 0..d {
                map.push((r * d + j) as i64);
            }
        }
        self.gather(a, map, vec![rows.len(), d])
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors"));
        }
        let (_, d) = self.dims2("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.dims2("concat_rows", p)?;
            if dp != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: vec![np, dp],
                });
            }
            total += np;
        }
        let mut data = Vec::with_capacity(total * d);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(data, vec![total, d], Op::ConcatRows(parts.to_vec()), req))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (n, _) = self.dims2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.dims2("concat_cols", p)?;
            if np != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: vec![np, dp],
                });
            }
            total += dp;
        }
        let mut data = vec![T::zero(); n * total];
        let mut offset = 0;
        for &p in parts {
            let dp = self.nodes[p.0].shape[1];
            let pd = &self.nodes[p.0].data;
            for i in 0..n {
                data[i * total + offset..i * total + offset + dp]
                    .copy_from_slice(&pd[i * dp..(i + 1) * dp]);
            }
            offset += dp;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(data, vec![n, total], Op::ConcatCols(parts.to_vec()), req))
    }

    pub fn softmax(&mut self, a: Val, axis: usize) -> Result<Val> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = softmax_fibers(&self.nodes[a.0].data, outer, shape[axis], inner);
        let req = self.requires(a);
        Ok(self.push(data, shape, Op::Softmax { src: a, axis }, req))
    }

    /// Row-wise layer normalization of `[n, d]` with affine `gamma`/`beta`
    /// of shape `[d]`.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: T) -> Result<Val> {
        let (n, d) = self.dims2("layer_norm", x)?;
        for &aff in &[gamma, beta] {
            if self.nodes[aff.0].shape != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![n, d],
                    rhs: self.nodes[aff.0].shape.clone(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![T::zero(); n * d];
        let dn = T::from_f64(d as f64);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / dn;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(data, vec![n, d], Op::LayerNorm { src: x, gamma, beta, eps }, req))
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |s, &v| s + v);
        let req = self.requires(a);
        self.push(vec![s], vec![1], Op::SumAll(a), req)
    }

    pub fn mean_all(&mut self, a: Val) -> Val {
        let len = self.nodes[a.0].data.len();
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |s, &v| s + v)
            / T::from_f64(len as f64);
        let req = self.requires(a);
        self.push(vec![s], vec![1], Op::MeanAll(a), req)
    }

    /// Column means of `[n, d]`, yielding `[1, d]`.
    pub fn mean_rows(&mut self, a: Val) -> Result<Val> {
        let (n, d) = self.dims2("mean_rows", a)?;
        let ad = &self.nodes[a.0].data;
        let nn = T::from_f64(n as f64);
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] += ad[i * d + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= nn);
        let req = self.requires(a);
        Ok(self.push(data, vec![1, d], Op::MeanRows(a), req))
    }

    /// Weighted multi-class cross-entropy over logit rows `[n, k]`.
    /// Loss is `sum_i w[t_i] * nll_i / sum_i w[t_i]`; log-softmax is fused
    /// for stability.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Val,
        targets: &[usize],
        class_weights: &[T],
    ) -> Result<Val> {
        let (n, k) = self.dims2("weighted_cross_entropy", logits)?;
        if targets.len() != n || class_weights.len() != k {
            return Err(Error::contract(format!(
                "weighted_cross_entropy: {} rows, {} targets, {} class weights for {} classes",
                n,
                targets.len(),
                class_weights.len(),
                k
            )));
        }
        if targets.iter().any(|&t| t >= k) {
            return Err(Error::contract("weighted_cross_entropy target out of range"));
        }
        let ld = &self.nodes[logits.0].data;
        let mut total = T::zero();
        let mut weight_sum = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - max).exp())
                .ln()
                + max;
            total += class_weights[t] * (lse - row[t]);
            weight_sum += class_weights[t];
        }
        let data = vec![total / weight_sum];
        let req = self.requires(logits);
        Ok(self.push(
            data,
            vec![1],
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                class_weights: class_weights.to_vec(),
            },
            req,
        ))
    }

    fn slot<'s>(&self, seed: &'s mut [Option<Vec<T>>], v: Val) -> Option<&'s mut Vec<T>> {
        if !self.requires(v) {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(seed[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub(super) fn propagate(&self, i: usize, g: &[T], seed: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if let Some(s) = self.slot(seed, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv;
                    }
                }
                if let Some(s) = self.slot(seed, *b) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(seed, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv;
                    }
                }
                if let Some(s) = self.slot(seed, *b) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= *gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bd = self.nodes[b.0].data.clone();
                    let s = self.slot(seed, a).unwrap();
                    for ((sv, gv), bv) in s.iter_mut().zip(g).zip(&bd) {
                        *sv += *gv * *bv;
                    }
                }
                if self.requires(b) {
                    let ad = self.nodes[a.0].data.clone();
                    let s = self.slot(seed, b).unwrap();
                    for ((sv, gv), av) in s.iter_mut().zip(g).zip(&ad) {
                        *sv += *gv * *av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bd = self.nodes[b.0].data.clone();
                    let s = self.slot(seed, a).unwrap();
                    for ((sv, gv), bv) in s.iter_mut().zip(g).zip(&bd) {
                        *sv += *gv / *bv;
                    }
                }
                if self.requires(b) {
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    let s = self.slot(seed, b).unwrap();
                    for (((sv, gv), av), bv) in s.iter_mut().zip(g).zip(&ad).zip(&bd) {
                        *sv -= *gv * *av / (*bv * *bv);
                    }
                }
            }
            Op::MinE(a, b) | Op::MaxE(a, b) => {
                let is_max = matches!(self.nodes[i].op, Op::MaxE(..));
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                let half = T::from_f64(0.5);
                let pick_a = |x: T, y: T| -> T {
                    let win = if is_max { x > y } else { x < y };
                    if win {
                        T::one()
                    } else if x == y {
                        half
                    } else {
                        T::zero()
                    }
                };
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * pick_a(ad[k], bd[k]);
                    }
                }
                if let Some(s) = self.slot(seed, b) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * (T::one() - pick_a(ad[k], bd[k]));
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(s) = self.slot(seed, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= *gv;
                    }
                }
            }
            Op::Abs(a) => {
                let a = *a;
                let ad = self.nodes[a.0].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        let sign = if ad[k] > T::zero() {
                            T::one()
                        } else if ad[k] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *sv += g[k] * sign;
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let ad = self.nodes[a.0].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        if ad[k] > T::zero() {
                            *sv += g[k];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let ad = self.nodes[a.0].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * gelu_deriv(ad[k]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let out = self.nodes[i].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * out[k] * (T::one() - out[k]);
                    }
                }
            }
            Op::Softplus(a) => {
                let a = *a;
                let ad = self.nodes[a.0].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * stable_sigmoid(ad[k]);
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                let ad = self.nodes[a.0].data.clone();
                if let Some(s) = self.slot(seed, a) {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] / ad[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(s) = self.slot(seed, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv * c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(s) = self.slot(seed, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv;
                    }
                }
            }
            Op::GradReverse { src, strength } => {
                let strength = *strength;
                if let Some(s) = self.slot(seed, *src) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= *gv * strength;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    let mut bt = vec![T::zero(); k * n];
                    transpose_into(&self.nodes[b.0].data, k, n, &mut bt);
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(g, &bt, m, n, k, &mut da);
                    let s = self.slot(seed, a).unwrap();
                    for (sv, dv) in s.iter_mut().zip(&da) {
                        *sv += *dv;
                    }
                }
                if self.requires(b) {
                    let mut at = vec![T::zero(); m * k];
                    transpose_into(&self.nodes[a.0].data, m, k, &mut at);
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(&at, g, k, m, n, &mut db);
                    let s = self.slot(seed, b).unwrap();
                    for (sv, dv) in s.iter_mut().zip(&db) {
                        *sv += *dv;
                    }
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let m = self.nodes[a.0].shape[0];
                let n = self.nodes[a.0].shape[1];
                if let Some(s) = self.slot(seed, a) {
                    // g has shape [n, m]; transpose it back.
                    for r in 0..n {
                        for c in 0..m {
                            s[c * n + r] += g[r * m + c];
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(s) = self.slot(seed, a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += *gv;
                    }
                }
                if let Some(s) = self.slot(seed, row) {
                    for i in 0..n {
                        for j in 0..d {
                            s[j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if self.requires(a) {
                    let bd = self.nodes[b.0].data.clone();
                    let s = self.slot(seed, a).unwrap();
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] += g[i] * bd[i * d + j];
                        }
                    }
                }
                if self.requires(b) {
                    let ad = self.nodes[a.0].data.clone();
                    let s = self.slot(seed, b).unwrap();
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] += g[i] * ad[i * d + j];
                        }
                    }
                }
            }
            Op::Gather { src, map } => {
                let src = *src;
                if self.requires(src) {
                    let map = map.clone();
                    let s = self.slot(seed, src).unwrap();
                    for (o, &ix) in map.iter().enumerate() {
                        if ix >= 0 {
                            s[ix as usize] += g[o];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if let Some(s) = self.slot(seed, p) {
                        for (sv, gv) in s.iter_mut().zip(&g[offset..offset + len]) {
                            *sv += *gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for p in parts {
                    let dp = self.nodes[p.0].shape[1];
                    if let Some(s) = self.slot(seed, p) {
                        for r in 0..n {
                            for c in 0..dp {
                                s[r * dp + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += dp;
                }
            }
            Op::Softmax { src, axis } => {
                let (src, axis) = (*src, *axis);
                if self.requires(src) {
                    let shape = &self.nodes[i].shape;
                    let outer: usize = shape[..axis].iter().product();
                    let axis_len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = self.nodes[i].data.clone();
                    let s = self.slot(seed, src).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| o * axis_len * inner + a * inner + ii;
                            let mut dot = T::zero();
                            for a in 0..axis_len {
                                dot += g[at(a)] * out[at(a)];
                            }
                            for a in 0..axis_len {
                                s[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { src, gamma, beta, eps } => {
                let (src, gamma, beta, eps) = (*src, *gamma, *beta, *eps);
                let (n, d) = (self.nodes[src.0].shape[0], self.nodes[src.0].shape[1]);
                let xd = self.nodes[src.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                let dn = T::from_f64(d as f64);
                // Per-row statistics recomputed; rows are tiny.
                let mut xhat = vec![T::zero(); n * d];
                let mut inv_std = vec![T::zero(); n];
                for r in 0..n {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
                    let var = row
                        .iter()
                        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / dn;
                    inv_std[r] = T::one() / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv_std[r];
                    }
                }
                if let Some(s) = self.slot(seed, gamma) {
                    for r in 0..n {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(seed, beta) {
                    for r in 0..n {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(seed, src) {
                    for r in 0..n {
                        let mut dxhat = vec![T::zero(); d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gd[j];
                        }
                        let sum_dxhat = dxhat.iter().fold(T::zero(), |s, &v| s + v);
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat[r * d..(r + 1) * d])
                            .fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..d {
                            s[r * d + j] += inv_std[r] / dn
                                * (dn * dxhat[j] - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(s) = self.slot(seed, *a) {
                    for sv in s.iter_mut() {
                        *sv += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                let len = T::from_f64(self.nodes[a.0].data.len() as f64);
                if let Some(s) = self.slot(seed, a) {
                    for sv in s.iter_mut() {
                        *sv += g[0] / len;
                    }
                }
            }
            Op::MeanRows(a) => {
                let a = *a;
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let nn = T::from_f64(n as f64);
                if let Some(s) = self.slot(seed, a) {
                    for r in 0..n {
                        for j in 0..d {
                            s[r * d + j] += g[j] / nn;
                        }
                    }
                }
            }
            Op::WeightedCe { logits, targets, class_weights } => {
                let logits = *logits;
                if self.requires(logits) {
                    let k = self.nodes[logits.0].shape[1];
                    let targets = targets.clone();
                    let cw = class_weights.clone();
                    let ld = self.nodes[logits.0].data.clone();
                    let weight_sum = targets
                        .iter()
                        .fold(T::zero(), |s, &t| s + cw[t]);
                    let s = self.slot(seed, logits).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * k..(r + 1) * k];
                        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                        let mut exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum = exps.iter().fold(T::zero(), |s, &v| s + v);
                        exps.iter_mut().for_each(|v| *v /= sum);
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            s[r * k + c] += g[0] * cw[t] * (exps[c] - onehot) / weight_sum;
                        }
                    }
                }
            }
        }
    }
}
