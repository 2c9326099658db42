//! Differentiable primitives on [`Var`].
//!
//! Broadcasting is limited to exact-shape operands and one-element scalars.
//! Row/channel bias additions and axis reductions are explicit ops.

use std::sync::Arc;

use super::tape::Var;
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped into the open interval (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

/// tanh clamped into the open interval (-1, 1).
pub fn tanh(x: f64) -> f64 {
    x.tanh().clamp(-SIGMOID_HI, SIGMOID_HI)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    Exp,
    Log,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => tanh(x),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) from input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn reduce_to(grad: Vec<f64>, numel: usize) -> Vec<f64> {
    if grad.len() == numel {
        grad
    } else {
        vec![grad.iter().sum()]
    }
}

impl<'t> Var<'t> {
    fn binary(self, rhs: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (na, nb) = (a.numel(), b.numel());
        let out_shape = if a.shape() == b.shape() {
            a.shape().to_vec()
        } else if nb == 1 {
            a.shape().to_vec()
        } else if na == 1 {
            b.shape().to_vec()
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(op, a.shape(), b.shape()));
        };
        let n = numel_of(&out_shape);
        let ai = |i: usize| if na == 1 { a.data()[0] } else { a.data()[i] };
        let bi = |i: usize| if nb == 1 { b.data()[0] } else { b.data()[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                Binary::Add => ai(i) + bi(i),
                Binary::Sub => ai(i) - bi(i),
                Binary::Mul => ai(i) * bi(i),
            })
            .collect();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        Ok(self.tape().op(
            name,
            &[self, rhs],
            Tensor::from_parts(out_shape, data),
            Box::new(move |inp, _, g| {
                let (a, b) = (inp[0], inp[1]);
                let (na, nb) = (a.numel(), b.numel());
                let at = |i: usize| if na == 1 { a.data()[0] } else { a.data()[i] };
                let bt = |i: usize| if nb == 1 { b.data()[0] } else { b.data()[i] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(i, v)| v * bt(i)).collect(),
                        g.iter().enumerate().map(|(i, v)| v * at(i)).collect(),
                    ),
                };
                vec![Some(reduce_to(ga, na)), Some(reduce_to(gb, nb))]
            }),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let y = x.map(|v| kind.apply(v));
        self.tape().op(
            kind.name(),
            &[self],
            y,
            Box::new(move |inp, out, g| {
                let gx = g
                    .iter()
                    .zip(inp[0].data())
                    .zip(out.data())
                    .map(|((g, &x), &y)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    /// Natural log; inputs must be positive.
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v * c);
        self.tape().op(
            "scale",
            &[self],
            y,
            Box::new(move |_, _, g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    /// Add a constant.
    pub fn offset(self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v + c);
        self.tape()
            .op("offset", &[self], y, Box::new(|_, _, g| vec![Some(g.to_vec())]))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape().op(
            "sum",
            &[self],
            Tensor::scalar(s),
            Box::new(|inp, _, g| vec![Some(vec![g[0]; inp[0].numel()])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self
            .tape()
            .op("reshape", &[self], y, Box::new(|_, _, g| vec![Some(g.to_vec())])))
    }

    /// `out[i] = self[index[i]]`, output reshaped to `shape`. Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel_of(shape) != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Parameter(format!(
                "gather index {bad} out of range for {} elements",
                x.numel()
            )));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self.tape().op(
            "gather",
            &[self],
            Tensor::from_parts(shape.to_vec(), data),
            Box::new(move |inp, _, g| {
                let mut gx = vec![0.0; inp[0].numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let idx: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(Arc::new(idx), &[c, r])
    }

    /// Slice `[start, end)` along axis 0.
    pub fn narrow0(self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::Parameter(format!(
                "narrow0 range {start}..{end} invalid for shape {s:?}"
            )));
        }
        let inner: usize = s[1..].iter().product();
        let idx: Vec<usize> = (start * inner..end * inner).collect();
        let mut shape = s.clone();
        shape[0] = end - start;
        self.gather(Arc::new(idx), &shape)
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat0(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let tape = first.tape();
        let s0 = first.shape();
        if s0.is_empty() {
            return Err(Error::dim("concat", &s0, &[1]));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            if v.rank() != s0.len() || v.shape()[1..] != s0[1..] {
                return Err(Error::dim("concat", &s0, v.shape()));
            }
            rows += v.shape()[0];
            sizes.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let mut shape = s0.clone();
        shape[0] = rows;
        Ok(tape.op(
            "concat",
            parts,
            Tensor::from_parts(shape, data),
            Box::new(move |_, _, g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g[off..off + n].to_vec();
                        off += n;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let y = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.tape().op(
            "matmul",
            &[self, rhs],
            Tensor::from_parts(vec![m, n], y),
            Box::new(move |inp, _, g| {
                let (a, b) = (inp[0].data(), inp[1].data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        gbrow.iter_mut().zip(grow).for_each(|(o, gv)| *o += av * gv);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `[L×d] + bias[d]` added to every row.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let d = *x.shape().last().unwrap_or(&0);
        if x.rank() != 2 || b.numel() != d {
            return Err(Error::dim("add_row_bias", x.shape(), b.shape()));
        }
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.tape().op(
            "add_row_bias",
            &[self, bias],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |_, _, g| {
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// `[C×...] + bias[C]` added to every element of each channel.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        if x.rank() < 1 || b.numel() != x.shape()[0] {
            return Err(Error::dim("add_channel_bias", x.shape(), b.shape()));
        }
        let inner = x.numel() / x.shape()[0];
        let mut y = x.data().to_vec();
        for (c, chunk) in y.chunks_mut(inner).enumerate() {
            let bv = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.tape().op(
            "add_channel_bias",
            &[self, bias],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |_, _, g| {
                let gb = g.chunks(inner).map(|c| c.iter().sum()).collect();
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Mean over axis 0 of a `[L×d]` matrix, giving `[1×d]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("mean_rows", x.shape(), &[2]));
        }
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let mut y = vec![0.0; d];
        for row in x.data().chunks(d) {
            y.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        y.iter_mut().for_each(|v| *v /= l as f64);
        Ok(self.tape().op(
            "mean_rows",
            &[self],
            Tensor::from_parts(vec![1, d], y),
            Box::new(move |_, _, g| {
                let mut gx = Vec::with_capacity(l * d);
                for _ in 0..l {
                    gx.extend(g.iter().map(|v| v / l as f64));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = x.data().to_vec();
        y.chunks_mut(d).for_each(softmax_in_place);
        self.tape().op(
            "softmax",
            &[self],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |_, out, g| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        o[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.tape().op(
            "log_softmax",
            &[self],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |_, out, g| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..d {
                        o[i] = gr[i] - yr[i].exp() * s;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-wise layer normalization of `[L×d]` with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        if x.rank() != 2 || gv.numel() != x.shape()[1] || bv.numel() != x.shape()[1] {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let d = x.shape()[1];
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(x.shape()[0]);
        for (row, out) in x.data().chunks(d).zip(xhat.chunks_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
        }
        let y: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.data())
                    .zip(bv.data())
                    .map(|((h, g), b)| h * g + b)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(self.tape().op(
            "layer_norm",
            &[self, gamma, beta],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |inp, _, g| {
                let gamma = inp[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, ((gr, hr), ox)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..d {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                        let gh = gr[i] * gamma[i];
                        s1 += gh;
                        s2 += gh * hr[i];
                    }
                    let inv_d = 1.0 / d as f64;
                    for i in 0..d {
                        let gh = gr[i] * gamma[i];
                        ox[i] = rstd[r] * (gh - inv_d * s1 - hr[i] * inv_d * s2);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Scale each row of `[L×d]` to unit L2 norm (with `eps` inside the root).
    pub fn normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("normalize_rows", x.shape(), &[2]));
        }
        let d = x.shape()[1];
        let norms: Vec<f64> = x
            .data()
            .chunks(d)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let y: Vec<f64> = x
            .data()
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        Ok(self.tape().op(
            "normalize_rows",
            &[self],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |_, out, g| {
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), n), o) in g
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(&norms)
                    .zip(gx.chunks_mut(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        o[i] = (gr[i] - yr[i] * dot) / n;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Plain `[m×k]·[k×n]` product on row-major slices.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            yrow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    y
}
