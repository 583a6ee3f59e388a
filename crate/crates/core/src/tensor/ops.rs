//! Forward implementations of the tape primitives.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_finite, Op, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Norms below this are treated as zero (hard error in l2-normalize).
pub const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    fn binary_elementwise(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        self.check_tape(a)?;
        self.check_tape(b)?;
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(&data, name)?;
        let ng = a.requires_grad || b.requires_grad;
        Ok(self.push(a.shape.clone(), data, ng, op))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a.node, b.node))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a.node, b.node))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a.node, b.node))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check_tape(a)?;
        let data: Vec<f64> = a.data.iter().map(|&x| x + c).collect();
        check_finite(&data, "add_scalar")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::AddScalar(a.node)))
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check_tape(a)?;
        let data: Vec<f64> = a.data.iter().map(|&x| x * c).collect();
        check_finite(&data, "mul_scalar")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::MulScalar(a.node, c)))
    }

    fn bcast_check(&self, a: &Tensor, b: &Tensor, name: &str) -> Result<()> {
        self.check_tape(a)?;
        self.check_tape(b)?;
        let (ra, rb) = (a.shape.len(), b.shape.len());
        if rb >= ra || a.shape[ra - rb..] != b.shape[..] {
            return Err(Error::Shape(format!(
                "{name}: {:?} is not a strict suffix of {:?}",
                b.shape, a.shape
            )));
        }
        Ok(())
    }

    /// `a + b` where b's shape is a strict suffix of a's shape (e.g. a bias
    /// vector added to every row, or a position table added to every batch
    /// element).
    pub fn add_bcast(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bcast_check(a, b, "add_bcast")?;
        let vlen = b.data.len();
        let data: Vec<f64> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data[i % vlen])
            .collect();
        check_finite(&data, "add_bcast")?;
        let ng = a.requires_grad || b.requires_grad;
        Ok(self.push(a.shape.clone(), data, ng, Op::AddBcast(a.node, b.node)))
    }

    /// `a * b` with suffix broadcast, used for layer-norm gain.
    pub fn mul_bcast(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bcast_check(a, b, "mul_bcast")?;
        let vlen = b.data.len();
        let data: Vec<f64> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data[i % vlen])
            .collect();
        check_finite(&data, "mul_bcast")?;
        let ng = a.requires_grad || b.requires_grad;
        Ok(self.push(a.shape.clone(), data, ng, Op::MulBcast(a.node, b.node)))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        self.check_tape(b)?;
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(&a.data, &b.data, m, k, n, &mut data);
        check_finite(&data, "matmul")?;
        let ng = a.requires_grad || b.requires_grad;
        Ok(self.push(vec![m, n], data, ng, Op::Matmul(a.node, b.node)))
    }

    /// Batched matrix product `[t,m,k] x [t,k,n] -> [t,m,n]`.
    pub fn batch_matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        self.check_tape(b)?;
        if a.shape.len() != 3
            || b.shape.len() != 3
            || a.shape[0] != b.shape[0]
            || a.shape[2] != b.shape[1]
        {
            return Err(Error::Shape(format!(
                "batch_matmul: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let (t, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
        let mut data = vec![0.0; t * m * n];
        for i in 0..t {
            matmul_acc(
                &a.data[i * m * k..(i + 1) * m * k],
                &b.data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        check_finite(&data, "batch_matmul")?;
        let ng = a.requires_grad || b.requires_grad;
        Ok(self.push(vec![t, m, n], data, ng, Op::BatchMatmul(a.node, b.node)))
    }

    fn unary(
        &mut self,
        a: &Tensor,
        name: &str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        self.check_tape(a)?;
        let data: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
        check_finite(&data, name)?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, op))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a.node))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, "exp", f64::exp, Op::Exp(a.node))
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, "log", f64::ln, Op::Log(a.node))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let d = last_dim(&a.shape, "softmax")?;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..a.data.len() / d {
            let row = &a.data[r * d..(r + 1) * d];
            let out = &mut data[r * d..(r + 1) * d];
            softmax_row(row, out);
        }
        check_finite(&data, "softmax")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::Softmax(a.node)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let d = last_dim(&a.shape, "log_softmax")?;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..a.data.len() / d {
            let row = &a.data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..d {
                data[r * d + j] = row[j] - lse;
            }
        }
        check_finite(&data, "log_softmax")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::LogSoftmax(a.node)))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let s: f64 = a.data.iter().sum();
        check_finite(&[s], "sum")?;
        Ok(self.push(vec![], vec![s], a.requires_grad, Op::Sum(a.node)))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        if a.data.is_empty() {
            return Err(Error::Shape("mean of empty tensor".to_string()));
        }
        let s: f64 = a.data.iter().sum::<f64>() / a.data.len() as f64;
        check_finite(&[s], "mean")?;
        Ok(self.push(vec![], vec![s], a.requires_grad, Op::Mean(a.node)))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let d = last_dim(&a.shape, "sum_last")?;
        let rows = a.data.len() / d;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = a.data[r * d..(r + 1) * d].iter().sum();
        }
        check_finite(&data, "sum_last")?;
        let shape = a.shape[..a.shape.len() - 1].to_vec();
        Ok(self.push(shape, data, a.requires_grad, Op::SumLast(a.node)))
    }

    /// Concatenate along `axis`. All parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".to_string()));
        }
        for p in parts {
            self.check_tape(p)?;
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = parts[0].shape.clone();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::Shape("concat rank mismatch".to_string()));
            }
            for (i, (&a, &b)) in p.shape.iter().zip(out_shape.iter()).enumerate() {
                if i != axis && a != b {
                    return Err(Error::Shape(format!(
                        "concat: {:?} vs {:?} on axis {i}",
                        p.shape, out_shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        out_shape[axis] = axis_total;
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let pa = p.shape[axis];
            for o in 0..outer {
                for x in 0..pa {
                    let dst = (o * axis_total + offset + x) * inner;
                    let src = (o * pa + x) * inner;
                    data[dst..dst + inner].copy_from_slice(&p.data[src..src + inner]);
                }
            }
            offset += pa;
        }
        let ng = parts.iter().any(|p| p.requires_grad);
        let ids = parts.iter().map(|p| p.node).collect();
        Ok(self.push(out_shape, data, ng, Op::Concat(ids, axis)))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_tape(a)?;
        if axis >= a.shape.len() || start + len > a.shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice axis {axis} [{start}, {}) of {:?}",
                start + len,
                a.shape
            )));
        }
        let inner: usize = a.shape[axis + 1..].iter().product();
        let outer: usize = a.shape[..axis].iter().product();
        let full = a.shape[axis];
        let mut out_shape = a.shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for x in 0..len {
                let src = (o * full + start + x) * inner;
                let dst = (o * len + x) * inner;
                data[dst..dst + inner].copy_from_slice(&a.data[src..src + inner]);
            }
        }
        Ok(self.push(
            out_shape,
            data,
            a.requires_grad,
            Op::Slice(a.node, axis, start, len),
        ))
    }

    /// 2-D transpose.
    pub fn transpose2(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose2 requires rank 2, got {:?}",
                a.shape
            )));
        }
        self.permute(a, &[1, 0])
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.check_tape(a)?;
        let rank = a.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute {:?} invalid for rank {rank}",
                perm
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
        let mut data = vec![0.0; a.data.len()];
        permute_copy(&a.data, &a.shape, &out_shape, perm, &mut data);
        Ok(self.push(
            out_shape,
            data,
            a.requires_grad,
            Op::Permute(a.node, perm.to_vec()),
        ))
    }

    /// Row-major reinterpretation; element count must be preserved.
    pub fn reshape(&mut self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        self.check_tape(a)?;
        let n: usize = new_shape.iter().product();
        if n != a.data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                a.shape, new_shape
            )));
        }
        Ok(self.push(
            new_shape.to_vec(),
            a.data.to_vec(),
            a.requires_grad,
            Op::Reshape(a.node),
        ))
    }

    /// l2-normalize each last-axis vector. A row with norm below 1e-12 is a
    /// hard error: silently smoothing it would corrupt contrastive geometry.
    pub fn l2_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let d = last_dim(&a.shape, "l2_normalize")?;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..a.data.len() / d {
            let row = &a.data[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::ZeroNorm(format!(
                    "l2_normalize: row {r} has norm {norm:e}"
                )));
            }
            for j in 0..d {
                data[r * d + j] = row[j] / norm;
            }
        }
        check_finite(&data, "l2_normalize")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::L2Normalize(a.node)))
    }

    /// Normalize each last-axis vector to zero mean / unit variance
    /// (eps 1e-5, no affine parameters; compose with mul_bcast/add_bcast).
    pub fn layer_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape(a)?;
        let d = last_dim(&a.shape, "layer_norm")?;
        let dn = d as f64;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..a.data.len() / d {
            let row = &a.data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / dn;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dn;
            let s = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) / s;
            }
        }
        check_finite(&data, "layer_norm")?;
        Ok(self.push(a.shape.clone(), data, a.requires_grad, Op::LayerNorm(a.node)))
    }

    /// Inverted dropout with a mask drawn from the supplied RNG; rate 0 keeps
    /// everything (but still consumes one draw per element, so RNG streams
    /// stay aligned across configurations). Evaluation-time dropout is
    /// identity by convention: callers simply skip this op.
    pub fn dropout(&mut self, a: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.check_tape(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} not in [0,1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..a.data.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = a.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        check_finite(&data, "dropout")?;
        Ok(self.push(
            a.shape.clone(),
            data,
            a.requires_grad,
            Op::Dropout(a.node, Rc::new(mask)),
        ))
    }

    /// Look rows of `table` ([vocab, d]) up by id; output shape is
    /// `prefix ++ [d]` with `ids.len() == prod(prefix)`.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize], prefix: &[usize]) -> Result<Tensor> {
        self.check_tape(table)?;
        if table.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-D, got {:?}",
                table.shape
            )));
        }
        let n: usize = prefix.iter().product();
        if n != ids.len() {
            return Err(Error::Shape(format!(
                "embedding: prefix {:?} implies {n} ids, got {}",
                prefix,
                ids.len()
            )));
        }
        let (vocab, d) = (table.shape[0], table.shape[1]);
        let mut data = vec![0.0; ids.len() * d];
        for (pos, &tok) in ids.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Validation(format!(
                    "token id {tok} out of range (vocab {vocab})"
                )));
            }
            data[pos * d..(pos + 1) * d].copy_from_slice(&table.data[tok * d..(tok + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            table.requires_grad,
            Op::Embedding(table.node, Rc::new(ids.to_vec())),
        ))
    }
}

fn last_dim(shape: &[usize], name: &str) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::Shape(format!("{name} requires rank >= 1, got {shape:?}"))),
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// out += a x b, with a [m,k], b [k,n]. i-k-j loop order keeps the inner
/// loop over contiguous rows of b and out.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// ga += g x b^T for c = a x b.
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            garow[kk] += acc;
        }
    }
}

/// gb += a^T x g for c = a x b.
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let gbrow = &mut gb[kk * n..(kk + 1) * n];
            for j in 0..n {
                gbrow[j] += av * grow[j];
            }
        }
    }
}

/// Copy `src` (shape `in_shape`) into `dst` laid out as `out_shape`, where
/// `out_shape[i] == in_shape[perm[i]]`.
pub(crate) fn permute_copy(
    src: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    perm: &[usize],
    dst: &mut [f64],
) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_strides = strides(out_shape);
    let mut idx = vec![0usize; rank];
    for v in src.iter().enumerate() {
        let (flat_in, &val) = v;
        // decode flat_in into in_shape coordinates
        let mut rem = flat_in;
        for d in 0..rank {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut flat_out = 0usize;
        for (o, &p) in perm.iter().enumerate() {
            flat_out += idx[p] * out_strides[o];
        }
        dst[flat_out] = val;
    }
}

/// buf += scatter of g (shape `out_shape`) back through the permutation.
pub(crate) fn permute_scatter_add(
    g: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
    perm: &[usize],
    buf: &mut [f64],
) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_strides = strides(out_shape);
    let mut idx = vec![0usize; rank];
    for (flat_out, &val) in g.iter().enumerate() {
        let mut rem = flat_out;
        for d in 0..rank {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut flat_in = 0usize;
        for (o, &p) in perm.iter().enumerate() {
            flat_in += idx[o] * in_strides[p];
        }
        buf[flat_in] += val;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
