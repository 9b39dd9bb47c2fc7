//! Dense 64-bit array substrate.
//!
//! Every reduction here accumulates left to right starting from `0.0`, so two
//! code paths that issue the same scalar operations in the same order produce
//! bit-identical results. The oracle module relies on this to compare the
//! optimized block against a naive transliteration with exact equality.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{usage_err, Error, Result};

/// Epsilon used by every layer norm in the crate.
pub const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(usage_err!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(usage_err!("ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(usage_err!("vstack: column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..start + n` as a new matrix.
    pub fn row_block(&self, start: usize, n: usize) -> Matrix {
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[start * self.cols..(start + n) * self.cols].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Rank-4 feature map `(batch, rows, cols, channels)`, channels fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl TensorMap {
    /// Checked constructor: rejects length mismatches and non-finite values.
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(usage_err!("tensor {shape:?} needs {n} values, got {}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {shape:?} element {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    for c in 0..shape[3] {
                        data.push(f(b, y, x, c));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// Tokens per batch element.
    pub fn tokens(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + y) * self.shape[2] + x) * self.shape[3]
    }

    #[inline]
    pub fn token(&self, b: usize, y: usize, x: usize) -> &[f64] {
        let o = self.offset(b, y, x);
        &self.data[o..o + self.shape[3]]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, y: usize, x: usize) -> &mut [f64] {
        let o = self.offset(b, y, x);
        let c = self.shape[3];
        &mut self.data[o..o + c]
    }

    /// All tokens as a `(batch * rows * cols) x channels` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.data.len() / self.shape[3].max(1),
            cols: self.shape[3],
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(shape: [usize; 4], m: Matrix) -> Result<Self> {
        if m.rows * m.cols != shape.iter().product::<usize>() || m.cols != shape[3] {
            return Err(usage_err!("matrix {}x{} does not fit tensor {shape:?}", m.rows, m.cols));
        }
        Ok(Self { shape, data: m.data })
    }

    /// Gather the listed tokens (flat `y * width + x` indices) of batch `b`.
    pub fn gather(&self, b: usize, token_ids: &[usize]) -> Matrix {
        let c = self.shape[3];
        let base = b * self.shape[1] * self.shape[2];
        let mut data = Vec::with_capacity(token_ids.len() * c);
        for &t in token_ids {
            let o = (base + t) * c;
            data.extend_from_slice(&self.data[o..o + c]);
        }
        Matrix { rows: token_ids.len(), cols: c, data }
    }

    /// Overwrite the listed tokens of batch `b` with the rows of `m`.
    pub fn scatter(&mut self, b: usize, token_ids: &[usize], m: &Matrix) {
        let c = self.shape[3];
        let base = b * self.shape[1] * self.shape[2];
        for (r, &t) in token_ids.iter().enumerate() {
            let o = (base + t) * c;
            self.data[o..o + c].copy_from_slice(m.row(r));
        }
    }

    /// Add the rows of `m` into the listed tokens of batch `b`.
    pub fn scatter_add(&mut self, b: usize, token_ids: &[usize], m: &Matrix) {
        let c = self.shape[3];
        let base = b * self.shape[1] * self.shape[2];
        for (r, &t) in token_ids.iter().enumerate() {
            let o = (base + t) * c;
            for (d, s) in self.data[o..o + c].iter_mut().zip(m.row(r)) {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &TensorMap) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Dense affine map `y = x W^T + b` with `W` stored `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearWeights {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(usage_err!("bias length {} != out_dim {}", bias.len(), weight.rows()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Matrix::identity(dim), bias: vec![0.0; dim] }
    }

    /// Normal(0, 1/in_dim) weights, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self { weight: Matrix::random_normal(out_dim, in_dim, std, rng), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.in_dim(), "linear: input width mismatch");
        let out = self.out_dim();
        let mut y = Matrix::zeros(x.rows(), out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            dot_rows(xr, |j| self.weight.row(j), yr);
            for (yj, b) in yr.iter_mut().zip(&self.bias) {
                *yj += b;
            }
        }
        y
    }

    /// Backward of [`forward`](Self::forward); parameter gradients are added
    /// into `grads`, the input gradient is returned.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut LinearWeights) -> Matrix {
        let (n, ind, outd) = (x.rows(), self.in_dim(), self.out_dim());
        debug_assert_eq!((dy.rows(), dy.cols()), (n, outd));
        let mut dx = Matrix::zeros(n, ind);
        for r in 0..n {
            let xr = x.row(r);
            let dyr = dy.row(r);
            let dxr = dx.row_mut(r);
            for (j, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, w) in dxr.iter_mut().zip(self.weight.row(j)) {
                    *d += g * w;
                }
                for (gw, xi) in grads.weight.row_mut(j).iter_mut().zip(xr) {
                    *gw += g * xi;
                }
                grads.bias[j] += g;
            }
        }
        dx
    }
}

/// Per-channel affine parameters of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        Self { gain: vec![1.0; channels], bias: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }
}

/// Saved state of a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LnContext {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(&b[..a.len()]) {
        acc += x * y;
    }
    acc
}

/// Four [`dot`] products sharing `a`, each accumulated in the same order as
/// [`dot`] and so bitwise equal to it.
pub fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let n = a.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    let mut acc = [0.0; 4];
    for i in 0..n {
        let x = a[i];
        acc[0] += x * b0[i];
        acc[1] += x * b1[i];
        acc[2] += x * b2[i];
        acc[3] += x * b3[i];
    }
    acc
}

/// `out[j] = dot(a, rows(j))` for `j` in `0..out.len()`.
pub fn dot_rows<'a>(a: &[f64], rows: impl Fn(usize) -> &'a [f64], out: &mut [f64]) {
    let n = out.len();
    let mut j = 0;
    while j + 4 <= n {
        let r = dot4(a, [rows(j), rows(j + 1), rows(j + 2), rows(j + 3)]);
        out[j..j + 4].copy_from_slice(&r);
        j += 4;
    }
    for (jj, o) in out.iter_mut().enumerate().skip(j) {
        *o = dot(a, rows(jj));
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Config(format!(
            "matmul: inner extents differ ({}x{} * {}x{})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ci = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for p in 0..a.cols {
            let aip = a.data[i * a.cols + p];
            let bp = &b.data[p * b.cols..(p + 1) * b.cols];
            for j in 0..b.cols {
                ci[j] += aip * bp[j];
            }
        }
    }
    Ok(c)
}

/// Gradients of `C = A B` given `dC`: returns `(dA, dB)`.
pub fn matmul_bwd(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    if dc.rows != a.rows || dc.cols != b.cols {
        return Err(usage_err!("matmul_bwd: upstream {}x{} does not match output", dc.rows, dc.cols));
    }
    let da = matmul(dc, &b.transpose())?;
    let db = matmul(&a.transpose(), dc)?;
    Ok((da, db))
}

/// Numerically stable softmax of one row, in place.
#[inline]
pub fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for r in 0..y.rows {
        softmax_in_place(y.row_mut(r));
    }
    y
}

/// Backward of [`softmax_rows`] from its output `y`.
pub fn softmax_rows_bwd(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if (y.rows, y.cols) != (dy.rows, dy.cols) {
        return Err(usage_err!("softmax_rows_bwd: shape mismatch"));
    }
    let mut dx = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let s = dot(yr, dyr);
        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = yr[j] * (dyr[j] - s);
        }
    }
    Ok(dx)
}

/// Layer norm over the columns of each row.
pub fn layer_norm_rows(x: &Matrix, norm: &NormParams) -> (Matrix, LnContext) {
    assert_eq!(x.cols, norm.channels(), "layer_norm: channel mismatch");
    let n = x.cols as f64;
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let mut sum = 0.0;
        for &v in xr {
            sum += v;
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for &v in xr {
            let d = v - mean;
            sq += d * d;
        }
        let inv = 1.0 / (sq / n + LN_EPS).sqrt();
        let hr = xhat.row_mut(r);
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * inv;
        }
        let yr = &mut y.data[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            yr[c] = xhat.data[r * x.cols + c] * norm.gain[c] + norm.bias[c];
        }
        inv_std.push(inv);
    }
    (y, LnContext { xhat, inv_std })
}

/// Backward of [`layer_norm_rows`]; accumulates gain/bias gradients.
pub fn layer_norm_rows_bwd(
    ctx: &LnContext,
    norm: &NormParams,
    dy: &Matrix,
    grads: &mut NormParams,
) -> Result<Matrix> {
    let (rows, cols) = (ctx.xhat.rows, ctx.xhat.cols);
    if (dy.rows, dy.cols) != (rows, cols) {
        return Err(usage_err!("layer_norm_bwd: upstream shape mismatch"));
    }
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let (h, g) = (ctx.xhat.row(r), dy.row(r));
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for c in 0..cols {
            grads.gain[c] += g[c] * h[c];
            grads.bias[c] += g[c];
            dxhat[c] = g[c] * norm.gain[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * h[c];
        }
        let inv = ctx.inv_std[r];
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv / n * (n * dxhat[c] - s1 - h[c] * s2);
        }
    }
    Ok(dx)
}

/// Layer norm of every token of a feature map.
pub fn layer_norm(x: &TensorMap, norm: &NormParams) -> (TensorMap, LnContext) {
    let (y, ctx) = layer_norm_rows(&x.to_matrix(), norm);
    (TensorMap { shape: x.shape, data: y.data }, ctx)
}

pub fn layer_norm_bwd(
    ctx: &LnContext,
    norm: &NormParams,
    dy: &TensorMap,
    grads: &mut NormParams,
) -> Result<TensorMap> {
    let dx = layer_norm_rows_bwd(ctx, norm, &dy.to_matrix(), grads)?;
    Ok(TensorMap { shape: dy.shape, data: dx.data })
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Matrix) -> Matrix {
    Matrix { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| gelu_scalar(v)).collect() }
}

/// Backward of [`gelu`] from its input.
pub fn gelu_bwd(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if (x.rows, x.cols) != (dy.rows, dy.cols) {
        return Err(usage_err!("gelu_bwd: shape mismatch"));
    }
    let data = x.data.iter().zip(&dy.data).map(|(&v, &g)| g * gelu_grad_scalar(v)).collect();
    Ok(Matrix { rows: x.rows, cols: x.cols, data })
}

pub fn add(a: &TensorMap, b: &TensorMap) -> Result<TensorMap> {
    if a.shape != b.shape {
        return Err(usage_err!("add: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(TensorMap { shape: a.shape, data })
}

/// Both operands of an addition receive the upstream gradient unchanged.
pub fn add_bwd(dy: &TensorMap) -> (TensorMap, TensorMap) {
    (dy.clone(), dy.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let p = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(p, m(&[&[2.0], &[4.0]]));
        assert_eq!(matmul(&Matrix::zeros(3, 3), &a).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn matmul_rejects_mismatched_inner() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn matmul_bwd_identity_with_ones_upstream() {
        // C = I A, dC = ones: dA = I^T ones = ones, dI = ones A^T (row sums of A).
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let (di, da) = matmul_bwd(&Matrix::identity(2), &a, &ones).unwrap();
        assert_eq!(da, ones);
        assert_eq!(di, m(&[&[3.0, 7.0], &[3.0, 7.0]]));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&m(&[&[0.0, 0.0]]));
        assert_eq!(y.as_slice(), &[0.5, 0.5]);

        let y = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(y.as_slice().iter().all(|v| v.is_finite()));
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12 && y.get(0, 1) < 1e-300);

        let y = softmax_rows(&m(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]));
        for (got, want) in y.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_bwd_uniform_row_uniform_upstream_is_zero() {
        let y = softmax_rows(&m(&[&[0.3, 0.3, 0.3, 0.3]]));
        let dx = softmax_rows_bwd(&y, &m(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert!(dx.max_abs() < 1e-16);
    }

    #[test]
    fn layer_norm_examples() {
        let norm = NormParams::new(3);
        let (y, _) = layer_norm_rows(&m(&[&[5.0, 5.0, 5.0]]), &norm);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);

        let (y, _) = layer_norm_rows(&m(&[&[1.0, 3.0]]), &NormParams::new(2));
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5 && (y.get(0, 1) - 1.0).abs() < 1e-5);

        let norm = NormParams { gain: vec![0.0; 3], bias: vec![0.5, -1.0, 2.0] };
        let (y, _) = layer_norm_rows(&m(&[&[1.0, -4.0, 9.0]]), &norm);
        assert_eq!(y.as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_input_gradient_is_shift_invariant() {
        let norm = NormParams { gain: vec![1.5, -0.5, 2.0], bias: vec![0.0; 3] };
        let (_, ctx) = layer_norm_rows(&m(&[&[2.0, -1.0, 0.5]]), &norm);
        let mut g = NormParams { gain: vec![0.0; 3], bias: vec![0.0; 3] };
        let dx = layer_norm_rows_bwd(&ctx, &norm, &m(&[&[0.3, -1.0, 0.7]]), &mut g).unwrap();
        assert!(dx.as_slice().iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(g.bias, vec![0.3, -1.0, 0.7]);
    }

    #[test]
    fn tensor_map_rejects_non_finite() {
        assert!(matches!(
            TensorMap::new([1, 1, 2, 1], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(TensorMap::new([1, 1, 2, 1], vec![1.0]).is_err());
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = TensorMap::random_normal([2, 3, 3, 4], 1.0, &mut rng);
        let ids = [0, 4, 8, 2];
        let g = x.gather(1, &ids);
        let mut y = x.clone();
        y.scatter(1, &ids, &Matrix::zeros(4, 4));
        y.scatter(1, &ids, &g);
        assert_eq!(x, y);
    }
}
