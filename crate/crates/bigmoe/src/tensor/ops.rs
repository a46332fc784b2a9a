//! Differentiable tensor operations.

use super::Tensor;
use crate::error::{Error, Result};

const LN_2PI_INV_SQRT: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn same_shape(a: &Tensor, b: &Tensor) -> bool {
    *a.inner.borrow().shape == *b.inner.borrow().shape
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

/// Elementwise binary op with scalar-tensor broadcasting on either side.
/// `f` computes the value, `dfa`/`dfb` the partials given (a, b).
fn binary_elementwise(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    f: fn(f64, f64) -> f64,
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (a_scalar, b_scalar) = (is_scalar(a), is_scalar(b));
    if !same_shape(a, b) && !a_scalar && !b_scalar {
        return Err(Error::Dim(format!(
            "{name}: shapes {:?} and {:?} are not compatible",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let n = ad.len().max(bd.len());
    let shape = if ad.len() >= bd.len() { a.shape() } else { b.shape() };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = ad[if a_scalar { 0 } else { i }];
        let y = bd[if b_scalar { 0 } else { i }];
        out.push(f(x, y));
    }
    drop(ad);
    drop(bd);

    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let (ad, bd) = (pa.data().to_vec(), pb.data().to_vec());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for (i, &gi) in g.iter().enumerate() {
                let x = ad[if ad.len() == 1 { 0 } else { i }];
                let y = bd[if bd.len() == 1 { 0 } else { i }];
                ga[if ad.len() == 1 { 0 } else { i }] += gi * dfa(x, y);
                gb[if bd.len() == 1 { 0 } else { i }] += gi * dfb(x, y);
            }
            pa.accum_grad(&ga);
            pb.accum_grad(&gb);
        }),
    ))
}

/// Elementwise unary op; `df` receives (input, output).
fn unary_elementwise(x: &Tensor, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let p = x.clone();
    Tensor::from_op(
        out,
        x.shape(),
        vec![x.clone()],
        Box::new(move |g, out_data| {
            let xd = p.data().to_vec();
            let gx: Vec<f64> = g
                .iter()
                .zip(xd.iter().zip(out_data))
                .map(|(&gi, (&xi, &oi))| gi * df(xi, oi))
                .collect();
            p.accum_grad(&gx);
        }),
    )
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn neg(&self) -> Tensor {
        unary_elementwise(self, |x| -x, |_, _| -1.0)
    }

    /// Multiply by a compile-time constant (not a graph input).
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v * c).collect();
        let p = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                p.accum_grad(&gx);
            }),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!(
                "matmul requires 2-D operands, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let (ad, bd) = (pa.data().to_vec(), pb.data().to_vec());
                // dA = G B^T, dB = A^T G
                let bt = transpose_raw(&bd, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(&ad, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                pa.accum_grad(&ga);
                pb.accum_grad(&gb);
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose requires 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(&self.data(), r, c);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _| {
                p.accum_grad(&transpose_raw(g, c, r));
            }),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| p.accum_grad(g)),
        ))
    }

    /// Concatenate along `axis`. 1-D tensors concatenate along axis 0; 2-D
    /// tensors support axis 0 (rows) and 1 (columns).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let ndim = parts[0].ndim();
        if axis >= ndim {
            return Err(Error::Dim(format!("concat axis {axis} out of range")));
        }
        if ndim == 1 {
            let mut data = Vec::new();
            let mut lens = Vec::new();
            for p in parts {
                if p.ndim() != 1 {
                    return Err(Error::Dim("concat rank mismatch".into()));
                }
                let d = p.data();
                lens.push(d.len());
                data.extend_from_slice(&d);
            }
            let total = data.len();
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let handles = owned.clone();
            return Ok(Tensor::from_op(
                data,
                vec![total],
                owned,
                Box::new(move |g, _| {
                    let mut off = 0;
                    for (p, &len) in handles.iter().zip(&lens) {
                        p.accum_grad(&g[off..off + len]);
                        off += len;
                    }
                }),
            ));
        }
        if ndim != 2 {
            return Err(Error::Dim("concat supports 1-D and 2-D tensors".into()));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            if s.len() != 2 || s[1 - axis] != shapes[0][1 - axis] {
                return Err(Error::Dim(format!(
                    "concat axis {axis}: incompatible shapes {shapes:?}"
                )));
            }
        }
        let fixed = shapes[0][1 - axis];
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (rows, cols) = if axis == 0 { (total, fixed) } else { (fixed, total) };
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for (p, s) in parts.iter().zip(&shapes) {
            let d = p.data();
            if axis == 0 {
                data[off * cols..(off + s[0]) * cols].copy_from_slice(&d);
            } else {
                for r in 0..rows {
                    data[r * cols + off..r * cols + off + s[1]]
                        .copy_from_slice(&d[r * s[1]..(r + 1) * s[1]]);
                }
            }
            off += s[axis];
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        let part_extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        Ok(Tensor::from_op(
            data,
            vec![rows, cols],
            owned,
            Box::new(move |g, _| {
                let mut off = 0;
                for (p, &ext) in handles.iter().zip(&part_extents) {
                    if axis == 0 {
                        p.accum_grad(&g[off * cols..(off + ext) * cols]);
                    } else {
                        let mut gp = vec![0.0; rows * ext];
                        for r in 0..rows {
                            gp[r * ext..(r + 1) * ext]
                                .copy_from_slice(&g[r * cols + off..r * cols + off + ext]);
                        }
                        p.accum_grad(&gp);
                    }
                    off += ext;
                }
            }),
        ))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("slice_rows requires 2-D, got {s:?}")));
        }
        if start + len > s[0] || len == 0 {
            return Err(Error::Dim(format!(
                "slice_rows [{start}, {start}+{len}) out of bounds for {} rows",
                s[0]
            )));
        }
        let cols = s[1];
        let data = self.data()[start * cols..(start + len) * cols].to_vec();
        let p = self.clone();
        let rows = s[0];
        Ok(Tensor::from_op(
            data,
            vec![len, cols],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * cols];
                gx[start * cols..(start + len) * cols].copy_from_slice(g);
                p.accum_grad(&gx);
            }),
        ))
    }

    /// Row `i` of a 2-D tensor as a 1-D vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("row requires 2-D, got {s:?}")));
        }
        if i >= s[0] {
            return Err(Error::Dim(format!("row {i} out of range for {} rows", s[0])));
        }
        let cols = s[1];
        let data = self.data()[i * cols..(i + 1) * cols].to_vec();
        let p = self.clone();
        let rows = s[0];
        Ok(Tensor::from_op(
            data,
            vec![cols],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * cols];
                gx[i * cols..(i + 1) * cols].copy_from_slice(g);
                p.accum_grad(&gx);
            }),
        ))
    }

    /// Tile a 1-D vector into `rows` identical rows.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Dim(format!("broadcast_rows requires 1-D, got {s:?}")));
        }
        let n = s[0];
        let d = self.data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&d);
        }
        drop(d);
        let p = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![rows, n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gv = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        gv[j] += g[r * n + j];
                    }
                }
                p.accum_grad(&gv);
            }),
        ))
    }

    /// `[m,n] + [n]`, bias added to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        let bs = bias.shape();
        if s.len() != 2 || bs.len() != 1 || bs[0] != s[1] {
            return Err(Error::Dim(format!(
                "add_bias: {s:?} + {bs:?} is not a row-wise bias"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let bd = bias.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        drop(bd);
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                px.accum_grad(g);
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        gb[j] += g[r * n + j];
                    }
                }
                pb.accum_grad(&gb);
            }),
        ))
    }

    /// Mean over axis 0 of a 2-D tensor.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("mean_rows requires 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += d[r * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        drop(d);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        gx[r * n + j] = g[j] / m as f64;
                    }
                }
                p.accum_grad(&gx);
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| {
                p.accum_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dim(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * axis_len * inner + a * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    mx = mx.max(d[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (d[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] /= sum;
                }
            }
        }
        drop(d);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, out_data| {
                // ds_i = s_i * (g_i - sum_j g_j s_j) per softmax slice
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| o * axis_len * inner + a * inner + i;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            dot += g[idx(a)] * out_data[idx(a)];
                        }
                        for a in 0..axis_len {
                            gx[idx(a)] = out_data[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                p.accum_grad(&gx);
            }),
        ))
    }

    /// Layer normalization over the last axis with affine (gamma, beta).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::Dim("layer_norm on 0-D".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dim(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last axis {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let x = &xd[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (x[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let xd = px.data().to_vec();
                let gd = pg.data().to_vec();
                let rows = xd.len() / d;
                let mut gx = vec![0.0; xd.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let x = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = x.iter().sum::<f64>() / d as f64;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        gx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                px.accum_grad(&gx);
                pg.accum_grad(&ggamma);
                pb.accum_grad(&gbeta);
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary_elementwise(
            self,
            |x| 0.5 * x * (1.0 + (LN_2PI_INV_SQRT * (x + GELU_C * x * x * x)).tanh()),
            |x, _| {
                let inner = LN_2PI_INV_SQRT * (x + GELU_C * x * x * x);
                let t = inner.tanh();
                let dinner = LN_2PI_INV_SQRT * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary_elementwise(self, |x| x.tanh(), |_, o| 1.0 - o * o)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_elementwise(self, |x| 1.0 / (1.0 + (-x).exp()), |_, o| o * (1.0 - o))
    }

    /// Mean cross-entropy of logits `[B, C]` against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("cross_entropy expects [B,C] logits, got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Input(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let d = self.data();
        let mut loss = 0.0;
        for (i, &lbl) in labels.iter().enumerate() {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            loss -= row[lbl] - lse;
        }
        loss /= b as f64;
        drop(d);
        let p = self.clone();
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| {
                let d = p.data().to_vec();
                let mut gx = vec![0.0; b * c];
                for (i, &lbl) in labels.iter().enumerate() {
                    let row = &d[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..c {
                        let sm = exps[j] / sum;
                        let tgt = if j == lbl { 1.0 } else { 0.0 };
                        gx[i * c + j] = g[0] * (sm - tgt) / b as f64;
                    }
                }
                p.accum_grad(&gx);
            }),
        ))
    }

    /// Element gather from a 2-D tensor: `out[i] = self[rows[i], cols[i]]`.
    pub fn gather2d(&self, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("gather2d requires 2-D, got {s:?}")));
        }
        if rows.len() != cols.len() {
            return Err(Error::Usage("gather2d: index arrays differ in length".into()));
        }
        let (m, n) = (s[0], s[1]);
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(Error::Dim("gather2d index out of bounds".into()));
        }
        let d = self.data();
        let out: Vec<f64> = rows.iter().zip(cols).map(|(&r, &c)| d[r * n + c]).collect();
        drop(d);
        let p = self.clone();
        let (rows, cols) = (rows.to_vec(), cols.to_vec());
        let len = rows.len();
        Ok(Tensor::from_op(
            out,
            vec![len],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for (i, (&r, &c)) in rows.iter().zip(&cols).enumerate() {
                    gx[r * n + c] += g[i];
                }
                p.accum_grad(&gx);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{assert_close, finite_diff_check};

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[3, 3]).unwrap();
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[0],[1]] = [[2],[4]]
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let z = Tensor::zeros(&[2, 3]);
        let a = Tensor::from_vec(vec![1.0; 12], &[3, 4]).unwrap();
        assert!(z.matmul(&a).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Dim(_))));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let u = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let s = u.softmax(0).unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::from_vec(vec![1000.0, 1000.0], &[2]).unwrap();
        let s = big.softmax(0).unwrap().to_vec();
        assert_close(&s, &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn softmax_two_logits_matches_scalar_oracle() {
        // Independent oracle: exp(x_i) / sum exp(x_j) computed directly.
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let s = x.softmax(0).unwrap().to_vec();
        let e1 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        assert_close(&s, &[e1 / (e1 + e2), e2 / (e1 + e2)], 1e-12);
        assert_close(&s, &[0.2689414213699951, 0.7310585786300049], 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let mut rng = crate::rng::derive_rng(11, "softmax-prop");
        for _ in 0..50 {
            let x = Tensor::randn(&mut rng, &[3, 5], 10.0);
            for axis in 0..2 {
                let s = x.softmax(axis).unwrap();
                let d = s.to_vec();
                let shape = s.shape();
                let (outer, alen, inner) = (
                    shape[..axis].iter().product::<usize>(),
                    shape[axis],
                    shape[axis + 1..].iter().product::<usize>(),
                );
                for o in 0..outer {
                    for i in 0..inner {
                        let sum: f64 =
                            (0..alen).map(|a| d[o * alen * inner + a * inner + i]).sum();
                        assert!((sum - 1.0).abs() <= 1e-12, "axis {axis} sum {sum}");
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let logits = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let loss = logits.cross_entropy(&[0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            logits.cross_entropy(&[2]),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn gelu_zero_is_zero() {
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert_eq!(x.gelu().to_vec(), vec![0.0]);
    }

    #[test]
    fn layer_norm_constant_vector_is_beta() {
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0, 5.0], &[1, 4]).unwrap();
        let gamma = Tensor::from_vec(vec![1.0; 4], &[4]).unwrap();
        let beta = Tensor::zeros(&[4]);
        let out = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for v in out.to_vec() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0], &[1, 2]).unwrap();
        let cat = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(cat.shape(), vec![3, 2]);
        assert_eq!(cat.slice_rows(2, 1).unwrap().to_vec(), vec![5.0, 6.0]);

        let c = Tensor::from_vec(vec![7.0, 8.0], &[2, 1]).unwrap();
        let wide = Tensor::concat(&[&a, &c], 1).unwrap();
        assert_eq!(wide.to_vec(), vec![1.0, 2.0, 7.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn gather2d_values_and_grad() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3])
            .unwrap()
            .param();
        let g = x.gather2d(&[0, 1, 1], &[2, 0, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 4.0, 4.0]);
        g.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn elementary_gradients_match_finite_differences() {
        let mut rng = crate::rng::derive_rng(42, "ops-fd");
        // Each closure maps a parameter vector to a scalar loss through one op.
        finite_diff_check(&mut rng, &[2, 3], 1e-5, 1e-7, |x| {
            x.gelu().sum_all()
        });
        finite_diff_check(&mut rng, &[4], 1e-5, 1e-7, |x| x.tanh().sum_all());
        finite_diff_check(&mut rng, &[4], 1e-5, 1e-7, |x| x.sigmoid().sum_all());
        finite_diff_check(&mut rng, &[3, 4], 1e-5, 1e-7, |x| {
            x.softmax(1).unwrap().mul(x).unwrap().sum_all()
        });
        finite_diff_check(&mut rng, &[2, 4], 1e-5, 1e-6, |x| {
            let gamma = Tensor::from_vec(vec![1.1, 0.9, 1.2, 0.8], &[4]).unwrap();
            let beta = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0], &[4]).unwrap();
            x.layer_norm(&gamma, &beta, 1e-5).unwrap().mul(x).unwrap().sum_all()
        });
        finite_diff_check(&mut rng, &[3, 3], 1e-5, 1e-7, |x| {
            let w = Tensor::from_vec((1..=9).map(|v| v as f64 / 10.0).collect(), &[3, 3]).unwrap();
            x.matmul(&w).unwrap().gelu().sum_all()
        });
        finite_diff_check(&mut rng, &[2, 2], 1e-5, 1e-7, |x| {
            x.cross_entropy(&[0, 1]).unwrap()
        });
        finite_diff_check(&mut rng, &[3], 1e-5, 1e-7, |x| {
            x.broadcast_rows(4).unwrap().gelu().sum_all()
        });
        finite_diff_check(&mut rng, &[2, 3], 1e-5, 1e-7, |x| {
            let b = Tensor::from_vec(vec![0.3, -0.4, 0.5], &[3]).unwrap();
            x.add_bias(&b).unwrap().tanh().sum_all()
        });
        finite_diff_check(&mut rng, &[4, 3], 1e-5, 1e-7, |x| {
            x.mean_rows().unwrap().gelu().sum_all()
        });
        finite_diff_check(&mut rng, &[1], 1e-5, 1e-7, |x| {
            // scalar broadcast through mul/add
            let v = Tensor::from_vec(vec![0.5, -1.5, 2.5], &[3]).unwrap();
            v.mul(x).unwrap().add(x).unwrap().tanh().sum_all()
        });
    }
}
