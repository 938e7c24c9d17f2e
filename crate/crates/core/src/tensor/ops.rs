use super::{Result, Tensor, TensorError};
use crate::rng::RngStream;

/// Recorded operation: the inputs of a node plus whatever the backward rule
/// needs that cannot be recovered from the output.
pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    Transpose(Tensor),
    SoftmaxRows(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Tensor),
    Dropout(Tensor, Vec<f64>),
    Sum(Tensor),
    MeanRows(Tensor),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    SliceRows(Tensor, usize),
    Reshape(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceRows(a, _)
            | Op::Reshape(a) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian product: hands each parent its share of `g`.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], emit: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = a.dims2().expect("matmul lhs");
                let n = b.dims2().expect("matmul rhs").1;
                if a.requires_grad() {
                    // g (m×n) · bᵀ (n×k)
                    let bv = b.values();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    emit(a, ga);
                }
                if b.requires_grad() {
                    // aᵀ (k×m) · g (m×n)
                    let av = a.values();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *r += aip * gv;
                            }
                        }
                    }
                    emit(b, gb);
                }
            }
            Op::Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                emit(a, g.iter().zip(b.values()).map(|(g, b)| g * b).collect());
                emit(b, g.iter().zip(a.values()).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, c) => emit(a, g.iter().map(|v| v * c).collect()),
            Op::AddRow(a, row) => {
                let n = row.numel();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(r, v)| *r += v);
                }
                emit(a, g.to_vec());
                emit(row, gr);
            }
            Op::Transpose(a) => {
                let (r, c) = a.dims2().expect("transpose input");
                // g is c×r
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                emit(a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = a.shape().last().copied().unwrap_or(1);
                let y = out.values();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out_r) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in out_r.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                emit(a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = gamma.numel();
                let gv = gamma.values();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, istd) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gxhat = 0.0;
                    let mut mean_gxhat_xhat = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                        let gxh = gr[j] * gv[j];
                        mean_gxhat += gxh;
                        mean_gxhat_xhat += gxh * xr[j];
                    }
                    mean_gxhat /= d as f64;
                    mean_gxhat_xhat /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = istd * (gr[j] * gv[j] - mean_gxhat - xr[j] * mean_gxhat_xhat);
                    }
                }
                emit(x, gx);
                emit(gamma, ggamma);
                emit(beta, gbeta);
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(a.values())
                    .map(|(g, &x)| g * (normal_cdf(x) + x * normal_pdf(x)))
                    .collect();
                emit(a, ga);
            }
            Op::Dropout(a, mask) => emit(a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Sum(a) => emit(a, vec![g[0]; a.numel()]),
            Op::MeanRows(a) => {
                let (m, _) = a.dims2().expect("mean_rows input");
                let scale = 1.0 / m as f64;
                let ga = (0..m).flat_map(|_| g.iter().map(|v| v * scale)).collect();
                emit(a, ga);
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let c = p.shape()[1];
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    emit(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    emit(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, c) = a.dims2().expect("slice_rows input");
                let mut ga = vec![0.0; a.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                emit(a, ga);
            }
            Op::Reshape(a) => emit(a, g.to_vec()),
        }
    }
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Training or inference behaviour for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (m, k) = self.dims2().map_err(|_| mismatch())?;
        let (k2, n) = other.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let (a, b) = (self.values(), other.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone()), "matmul")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let v = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Add(self.clone(), other.clone()), "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let v = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Sub(self.clone(), other.clone()), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let v = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Mul(self.clone(), other.clone()), "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let v = self.values().iter().map(|a| a * c).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Scale(self.clone(), c), "scale")
    }

    /// Adds `row` (length = last dimension) to every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        if row.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let rv = row.values();
        let v = self
            .values()
            .chunks(c)
            .flat_map(|r| r.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::AddRow(self.clone(), row.clone()), "add_row")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let a = self.values();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = a[i * c + j];
            }
        }
        Tensor::from_op(vec![c, r], v, Op::Transpose(self.clone()), "transpose")
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| {
            TensorError::InvalidArgument("softmax_rows needs at least one axis".into())
        })?;
        let mut v = Vec::with_capacity(self.numel());
        for row in self.values().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = v.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                v.push(e);
            }
            v[start..].iter_mut().for_each(|e| *e /= sum);
        }
        Tensor::from_op(self.shape().to_vec(), v, Op::SoftmaxRows(self.clone()), "softmax_rows")
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            TensorError::InvalidArgument("layer_norm needs at least one axis".into())
        })?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let rows = self.numel() / d;
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(self.numel());
        let (gv, bv) = (gamma.values(), beta.values());
        for row in self.values().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            if !istd.is_finite() {
                return Err(TensorError::NonFinite("layer_norm"));
            }
            inv_std.push(istd);
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let op = Op::LayerNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
        };
        Tensor::from_op(self.shape().to_vec(), out, op, "layer_norm")
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Tensor> {
        let v = self.values().iter().map(|&x| x * normal_cdf(x)).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Gelu(self.clone()), "gelu")
    }

    /// Inverted dropout. Eval mode and rate 0 return `self` untouched.
    pub fn dropout(&self, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let v = self.values().iter().zip(&mask).map(|(a, m)| a * m).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Dropout(self.clone(), mask), "dropout")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.values().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()), "sum")
    }

    /// Mean over rows: `[m × n] -> [1 × n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut v = vec![0.0; n];
        for row in self.values().chunks(n) {
            v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        v.iter_mut().for_each(|a| *a /= m as f64);
        Tensor::from_op(vec![1, n], v, Op::MeanRows(self.clone()), "mean_rows")
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let rows = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += c;
        }
        let mut v = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                v.extend_from_slice(p.row(r)?);
            }
        }
        Tensor::from_op(vec![rows, total], v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let cols = first.dims2()?.1;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
        }
        let v = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
        Tensor::from_op(vec![rows, cols], v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if len == 0 || start + len > r {
            return Err(TensorError::InvalidArgument(format!(
                "rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let v = self.values()[start * c..(start + len) * c].to_vec();
        Tensor::from_op(vec![len, c], v, Op::SliceRows(self.clone(), start), "slice_rows")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        super::check_shape(shape, self.numel())?;
        Tensor::from_op(shape.to_vec(), self.values().to_vec(), Op::Reshape(self.clone()), "reshape")
    }
}
