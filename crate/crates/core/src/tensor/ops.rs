//! Elementwise, broadcasting, reduction and matrix primitives.

use super::tape::Var;
use super::{shape_err, Result, Tensor};
#[cfg(test)]
use super::TensorError;

/// Same-rank broadcasting: every axis must match or be 1 on one side.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank differs: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn source_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if src[ax] == 1 { 0 } else { acc };
        acc *= src[ax];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn accumulate(map: Option<&[usize]>, len: usize, vals: impl Iterator<Item = f64>) -> Vec<f64> {
    match map {
        None => vals.collect(),
        Some(map) => {
            let mut out = vec![0.0; len];
            for (&i, v) in map.iter().zip(vals) {
                out[i] += v;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    fn da(self, _a: f64, b: f64) -> f64 {
        match self {
            Binary::Add | Binary::Sub => 1.0,
            Binary::Mul => b,
            Binary::Div => 1.0 / b,
        }
    }

    fn db(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => 1.0,
            Binary::Sub => -1.0,
            Binary::Mul => a,
            Binary::Div => -a / (b * b),
        }
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
        let amap = (a.shape() != out_shape.as_slice()).then(|| source_index(&out_shape, a.shape()));
        let bmap = (b.shape() != out_shape.as_slice()).then(|| source_index(&out_shape, b.shape()));
        let n: usize = out_shape.iter().product();
        let ad = a.data();
        let bd = b.data();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = amap.as_ref().map_or_else(|| ad[i], |m| ad[m[i]]);
                let y = bmap.as_ref().map_or_else(|| bd[i], |m| bd[m[i]]);
                op.apply(x, y)
            })
            .collect();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape().record(value, &[self, other], move |g, needs| {
            let ad = a.data();
            let bd = b.data();
            let pair = |i: usize| {
                (
                    amap.as_ref().map_or_else(|| ad[i], |m| ad[m[i]]),
                    bmap.as_ref().map_or_else(|| bd[i], |m| bd[m[i]]),
                )
            };
            let ga = needs[0].then(|| {
                accumulate(
                    amap.as_deref(),
                    ad.len(),
                    g.iter().enumerate().map(|(i, &gi)| {
                        let (x, y) = pair(i);
                        gi * op.da(x, y)
                    }),
                )
            });
            let gb = needs[1].then(|| {
                accumulate(
                    bmap.as_deref(),
                    bd.len(),
                    g.iter().enumerate().map(|(i, &gi)| {
                        let (x, y) = pair(i);
                        gi * op.db(x, y)
                    }),
                )
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let saved_y = y.clone();
        self.tape().record(y, &[self], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data())
                .zip(saved_y.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `max(x, floor)`; the gradient is passed through only above the floor.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    /// `x ln x` with the convention `0 ln 0 = 0`; the derivative at 0 is
    /// evaluated at a 1e-12 floor.
    pub fn xlogx(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x * x.ln() } else { 0.0 },
            |x, _| x.max(1e-12).ln() + 1.0,
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.len();
        let value = Tensor::scalar(x.sum());
        self.tape()
            .record(value, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums broadcast axes away so the result has `shape` (the adjoint of
    /// broadcasting).
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let full = broadcast_shape("sum_to", x.shape(), shape)?;
        if full != x.shape() {
            return Err(shape_err(
                "sum_to",
                format!("{shape:?} does not broadcast to {:?}", x.shape()),
            ));
        }
        let map = source_index(x.shape(), shape);
        let len: usize = shape.iter().product();
        let data = accumulate(Some(&map), len, x.data().iter().copied());
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(map.iter().map(|&i| g[i]).collect())]
        }))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let full = broadcast_shape("broadcast_to", x.shape(), shape)?;
        if full != shape {
            return Err(shape_err(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", x.shape()),
            ));
        }
        let map = source_index(shape, x.shape());
        let len = x.len();
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(accumulate(Some(&map), len, g.iter().copied()))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        Ok(self
            .tape()
            .record(value, &[self], move |g, _| vec![Some(g.to_vec())]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape().record(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // g [m,n] x b^T [n,k]
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga, 0.0);
                ga
            });
            let gb = needs[1].then(|| {
                // a^T [k,m] x g [m,n]
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("transpose")?;
        let value = Tensor::from_parts(vec![n, m], transpose(x.data(), m, n));
        Ok(self
            .tape()
            .record(value, &[self], move |g, _| vec![Some(transpose(g, n, m))]))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&1);
        let mut y = x.to_vec();
        for row in y.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let saved = value.clone();
        self.tape().record(value, &[self], move |g, _| {
            let mut grad = vec![0.0; g.len()];
            for ((gr, yr), out) in g
                .chunks(cols)
                .zip(saved.data().chunks(cols))
                .zip(grad.chunks_mut(cols))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(grad)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&1);
        let mut y = x.to_vec();
        for row in y.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let saved = value.clone();
        self.tape().record(value, &[self], move |g, _| {
            let mut grad = vec![0.0; g.len()];
            for ((gr, yr), out) in g
                .chunks(cols)
                .zip(saved.data().chunks(cols))
                .zip(grad.chunks_mut(cols))
            {
                let total: f64 = gr.iter().sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = gi - yi.exp() * total;
                }
            }
            vec![Some(grad)]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        let total = x.len();
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut grad = vec![0.0; total];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                grad[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(grad)]
        }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tape = first.tape();
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(shape_err("concat", format!("{s:?} vs {base:?}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total_dim;
        let value = Tensor::from_parts(shape, data);
        Ok(tape.record(value, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = dims
                .iter()
                .zip(needs)
                .map(|(&d, &need)| need.then(|| Vec::with_capacity(outer * d * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &d) in grads.iter_mut().zip(&dims) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[offset..offset + d * inner]);
                    }
                    offset += d * inner;
                }
            }
            grads
        }))
    }

    /// Divides each row of a `[m, n]` matrix by its Euclidean norm.
    pub fn l2_normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let (m, _) = self.value().dims2("l2_normalize_rows")?;
        let norm = self.square().sum_to(&[m, 1])?.add_scalar(eps).sqrt();
        self.div(norm)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// `c = a * b + beta * c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the bounds of all three operands are asserted above and the
    // output slice is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
