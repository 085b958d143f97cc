//! Core differentiable operations.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Clamp applied before the logit in [`Graph::inverse_sigmoid`].
pub const INV_SIGMOID_EPS: f64 = 1e-5;

/// `c (+)= op(a) · op(b)` with `op(a)` of size m×k and `op(b)` of size k×n,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access made through these
    // pointers and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_f(x)
}

/// Logit of `x` clamped to `[ε, 1 − ε]`.
pub fn inverse_sigmoid(x: f64) -> f64 {
    // ln((1 − ε)/ε), evaluated without the rounding of 1 − ε
    let bound = (-INV_SIGMOID_EPS).ln_1p() - INV_SIGMOID_EPS.ln();
    if x >= 1.0 - INV_SIGMOID_EPS {
        bound
    } else if x <= INV_SIGMOID_EPS {
        -bound
    } else {
        (x / (1.0 - x)).ln()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        // df receives (input, output)
        self.custom(out, &[a], move |ctx| {
            let x = ctx.input(0).data();
            let y = ctx.output().data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
        );
        Ok(self.custom(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
        );
        Ok(self.custom(out, &[a, b], |ctx| {
            vec![
                Some(ctx.grad.to_vec()),
                Some(ctx.grad.iter().map(|g| -g).collect()),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        );
        Ok(self.custom(out, &[a, b], |ctx| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            let ga = ctx.needs(0).then(|| ctx.grad.iter().zip(y).map(|(g, q)| g * q).collect());
            let gb = ctx.needs(1).then(|| ctx.grad.iter().zip(x).map(|(g, p)| g * p).collect());
            vec![ga, gb]
        }))
    }

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias broadcast).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.suffix_check("add_bcast", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(y.data()).for_each(|(o, q)| *o += q);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.custom(out, &[a, b], move |ctx| {
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; n];
                for chunk in ctx.grad.chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                }
                gb
            });
            vec![Some(ctx.grad.to_vec()), gb]
        }))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.suffix_check("mul_bcast", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(y.data()).for_each(|(o, q)| *o *= q);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.custom(out, &[a, b], move |ctx| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            let ga = ctx.needs(0).then(|| {
                let mut ga = ctx.grad.to_vec();
                for chunk in ga.chunks_mut(n) {
                    chunk.iter_mut().zip(y).for_each(|(o, q)| *o *= q);
                }
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; n];
                for (gc, xc) in ctx.grad.chunks(n).zip(x.chunks(n)) {
                    for i in 0..n {
                        gb[i] += gc[i] * xc[i];
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_f, |_, y| y * (1.0 - y))
    }

    /// Logit with inputs clamped to `[1e-5, 1 − 1e-5]`; zero gradient where
    /// the clamp is active.
    pub fn inverse_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, inverse_sigmoid, |x, _| {
            if (INV_SIGMOID_EPS..=1.0 - INV_SIGMOID_EPS).contains(&x) {
                1.0 / (x * (1.0 - x))
            } else {
                0.0
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.custom(Tensor::scalar(s), &[a], |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.input(0).numel()])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.custom(Tensor::from_parts(vec![n, m], out), &[a, b], move |ctx| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, ctx.grad, false, y, true, &mut ga, false);
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; k * m];
                gemm(k, n, m, x, true, ctx.grad, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", format!("{sa:?} x {sb:?}^T")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.custom(Tensor::from_parts(vec![n, m], out), &[a, b], move |ctx| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, ctx.grad, false, y, false, &mut ga, false);
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; m * k];
                gemm(m, n, k, ctx.grad, true, x, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` over the last axis of `x`; `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(Error::dim("linear", format!("x {sx:?}, w {sw:?}")));
        }
        let fan_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim("linear", format!("w {sw:?}, b {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            for r in out.chunks_mut(fan_out) {
                r.copy_from_slice(self.value(b).data());
            }
        }
        gemm(rows, fan_in, fan_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fan_out;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.custom(Tensor::from_parts(shape, out), &parents, move |ctx| {
            let (xv, wv) = (ctx.input(0).data(), ctx.input(1).data());
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![0.0; rows * fan_in];
                gemm(rows, fan_out, fan_in, ctx.grad, false, wv, true, &mut gx, false);
                gx
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![0.0; fan_in * fan_out];
                gemm(fan_in, rows, fan_out, xv, true, ctx.grad, false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.num_inputs() == 3 {
                let gb = ctx.needs(2).then(|| {
                    let mut gb = vec![0.0; fan_out];
                    for r in ctx.grad.chunks(fan_out) {
                        gb.iter_mut().zip(r).for_each(|(s, g)| *s += g);
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        Ok(self.custom(Tensor::from_parts(shape, out), &[a], move |ctx| {
            let y = ctx.output().data();
            let g = ctx.grad;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.custom(Tensor::from_parts(shape, out), &[x, gamma, beta], move |ctx| {
            let g = ctx.grad;
            let gv = ctx.input(1).data();
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..c {
                        let d = g[r * c + j] * gv[j];
                        m1 += d;
                        m2 += d * xhat[r * c + j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let d = g[r * c + j] * gv[j];
                        gx[r * c + j] = inv_std[r] * (d - m1 - xhat[r * c + j] * m2);
                    }
                }
                gx
            });
            let (mut gg, mut gb) = (vec![0.0; c], vec![0.0; c]);
            for r in 0..rows {
                for j in 0..c {
                    gg[j] += g[r * c + j] * xhat[r * c + j];
                    gb[j] += g[r * c + j];
                }
            }
            vec![gx, Some(gg), Some(gb)]
        }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + sz * inner].copy_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
            offset += sz;
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.custom(Tensor::from_parts(shape, out), parts, move |ctx| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (i, &sz) in sizes.iter().enumerate() {
                if ctx.needs(i) {
                    let mut g = vec![0.0; outer * sz * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        g[o * sz * inner..(o + 1) * sz * inner]
                            .copy_from_slice(&ctx.grad[src..src + sz * inner]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += sz;
            }
            grads
        }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::dim("slice", format!("{start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let len = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.custom(Tensor::from_parts(oshape, out), &[a], move |ctx| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                g[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.custom(Tensor::from_parts(oshape, out), &[a], move |ctx| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    g[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.custom(out, &[a], |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.custom(Tensor::from_parts(vec![c, r], out), &[a], move |ctx| {
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[i * c + j] = ctx.grad[j * r + i];
                }
            }
            vec![Some(g)]
        }))
    }

    /// Rows `idx` of `a` along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().unwrap_or(&0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {shape:?}")));
        }
        let cols = self.value(a).numel() / n.max(1);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(self.custom(Tensor::from_parts(oshape, out), &[a], move |ctx| {
            let mut g = vec![0.0; n * cols];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    g[i * cols + j] += ctx.grad[r * cols + j];
                }
            }
            vec![Some(g)]
        }))
    }
}
