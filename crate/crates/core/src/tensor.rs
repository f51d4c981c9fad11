//! Dense row-major tensors and the raw kernels the tape is built on.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds {d}");
                acc * d + i
            })
    }

    /// Row `r` of a matrix (or of the trailing two axes flattened).
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.shape.last().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a non-finite error naming `what` when any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} {:?}", self.shape)))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`. Same for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the index ranges implied by the dimensions and strides.
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

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

/// Numerically stable softmax of one slice.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(softmax(values))` computed without forming the probabilities first.
pub fn log_softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    values.iter().map(|&v| v - lse).collect()
}

/// Output length of a transposed convolution: `(len - 1) * stride + kernel - 2 * padding`.
///
/// Returns `None` when the result would be smaller than one.
pub fn conv_transpose_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (len.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&t| t >= 1)
}

/// Splits a rank-2 or rank-3 sequence tensor into (batch, length, channels).
fn seq_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [len, ch] => Ok((1, len, ch)),
        [b, len, ch] => Ok((b, len, ch)),
        _ => Err(Error::dim("sequence", t.shape(), &[])),
    }
}

fn seq_shape(like: &Tensor, batch: usize, len: usize, ch: usize) -> Vec<usize> {
    if like.rank() == 2 {
        vec![len, ch]
    } else {
        vec![batch, len, ch]
    }
}

fn kernel_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [k, cin, cout] => Ok((k, cin, cout)),
        _ => Err(Error::dim("conv kernel", w.shape(), &[])),
    }
}

fn check_conv_params(stride: usize, kernel: usize) -> Result<()> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config(format!(
            "kernel {kernel} and stride {stride} must be at least 1"
        )));
    }
    Ok(())
}

/// Transposed 1-d convolution (a.k.a. deconvolution) over `[B x T_in x C_in]`
/// or `[T_in x C_in]` input with a `[k x C_in x C_out]` kernel.
///
/// Input position `t` scatters `x[t] . W[j]` into output position `t * s + j - p`.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, t_in, c_in) = seq_dims(x)?;
    let (k, kc_in, c_out) = kernel_dims(w)?;
    check_conv_params(stride, k)?;
    if kc_in != c_in {
        return Err(Error::dim("conv_transpose1d", x.shape(), w.shape()));
    }
    let t_out = conv_transpose_len(t_in, k, stride, padding).ok_or_else(|| {
        Error::Config(format!(
            "transposed conv output length < 1 (len {t_in}, k {k}, s {stride}, p {padding})"
        ))
    })?;
    let rows = batch * t_in;
    let mut out = vec![0.0; batch * t_out * c_out];
    let mut tap = vec![0.0; rows * c_out];
    for j in 0..k {
        let wj = &w.data[j * c_in * c_out..(j + 1) * c_in * c_out];
        gemm(rows, c_in, c_out, &x.data, false, wj, false, 0.0, &mut tap);
        for b in 0..batch {
            for t in 0..t_in {
                let Some(pos) = (t * stride + j).checked_sub(padding).filter(|&q| q < t_out) else {
                    continue;
                };
                let src = &tap[(b * t_in + t) * c_out..(b * t_in + t + 1) * c_out];
                let dst = &mut out[(b * t_out + pos) * c_out..(b * t_out + pos + 1) * c_out];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }
    Tensor::new(&seq_shape(x, batch, t_out, c_out), out)
}

/// Gathers rows of `y` at `t * stride + j - padding` for `t < t_short`; zero rows where out of range.
fn gather_taps(
    y: &[f64],
    batch: usize,
    len: usize,
    ch: usize,
    t_short: usize,
    j: usize,
    stride: usize,
    padding: usize,
    buf: &mut [f64],
) {
    for b in 0..batch {
        for t in 0..t_short {
            let dst = &mut buf[(b * t_short + t) * ch..(b * t_short + t + 1) * ch];
            match (t * stride + j).checked_sub(padding).filter(|&q| q < len) {
                Some(pos) => dst.copy_from_slice(&y[(b * len + pos) * ch..(b * len + pos + 1) * ch]),
                None => dst.fill(0.0),
            }
        }
    }
}

/// Strided 1-d convolution mapping `[B x L x C_out]` to `[B x T x C_in]` with the same
/// kernel layout as [`conv_transpose1d`], so the two are adjoint to each other.
///
/// `T = floor((L + 2p - k) / s) + 1`.
pub fn conv1d(y: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, len, c_out) = seq_dims(y)?;
    let (k, _, kc_out) = kernel_dims(w)?;
    check_conv_params(stride, k)?;
    if kc_out != c_out {
        return Err(Error::dim("conv1d", y.shape(), w.shape()));
    }
    let span = (len + 2 * padding)
        .checked_sub(k)
        .ok_or_else(|| Error::Config(format!("conv1d input length {len} shorter than kernel {k}")))?;
    let t_short = span / stride + 1;
    conv1d_to_len(y, w, stride, padding, t_short)
}

/// Like [`conv1d`] but with the output length given explicitly.
pub(crate) fn conv1d_to_len(
    y: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    t_short: usize,
) -> Result<Tensor> {
    let (batch, len, c_out) = seq_dims(y)?;
    let (k, c_in, _) = kernel_dims(w)?;
    let rows = batch * t_short;
    let mut out = vec![0.0; rows * c_in];
    let mut taps = vec![0.0; rows * c_out];
    for j in 0..k {
        gather_taps(&y.data, batch, len, c_out, t_short, j, stride, padding, &mut taps);
        let wj = &w.data[j * c_in * c_out..(j + 1) * c_in * c_out];
        gemm(rows, c_out, c_in, &taps, false, wj, true, 1.0, &mut out);
    }
    Tensor::new(&seq_shape(y, batch, t_short, c_in), out)
}

/// Kernel gradient of [`conv_transpose1d`] given its input `x` and output gradient `g`.
pub(crate) fn conv_transpose1d_kernel_grad(
    x: &Tensor,
    g: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, t_in, c_in) = seq_dims(x)?;
    let (_, t_out, c_out) = seq_dims(g)?;
    let rows = batch * t_in;
    let mut out = vec![0.0; kernel * c_in * c_out];
    let mut taps = vec![0.0; rows * c_out];
    for j in 0..kernel {
        gather_taps(&g.data, batch, t_out, c_out, t_in, j, stride, padding, &mut taps);
        let dst = &mut out[j * c_in * c_out..(j + 1) * c_in * c_out];
        gemm(c_in, rows, c_out, &x.data, true, &taps, false, 0.0, dst);
    }
    Tensor::new(&[kernel, c_in, c_out], out)
}
