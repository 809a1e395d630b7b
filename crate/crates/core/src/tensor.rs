use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Rank 0 (empty shape) is a scalar with one
/// element; matrices are rank 2 with shape `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of trailing-dimension columns; scalars count as one column.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// View of the tensor as `(rows, cols)` over the last dimension.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = self.last_dim();
        let rows = self.data.len().checked_div(cols).unwrap_or(0);
        (rows, cols)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Unit-normalized copy; rejects near-zero vectors instead of dividing
    /// by (almost) nothing.
    pub fn normalized(&self) -> Result<Tensor> {
        let n = self.norm();
        if n < NORM_FLOOR {
            return Err(Error::contract(format!(
                "cannot normalize a vector with norm {n:.3e}"
            )));
        }
        Ok(self.scale(1.0 / n))
    }
}

/// Vectors shorter than this are treated as zero for normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity between same-shape tensors viewed as flat vectors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "cosine",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let na = a.norm();
    let nb = b.norm();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::contract(format!(
            "cosine undefined for near-zero vectors (norms {na:.3e}, {nb:.3e})"
        )));
    }
    Ok(dot(a.data(), b.data()) / (na * nb))
}

/// Largest elementwise absolute difference; errors on shape mismatch.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "max_abs_diff",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Exact bit equality of shape and every element, including signed zeros.
pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Temperature softmax over the last dimension with max subtraction.
/// Row sums use the fixed left-to-right element order.
pub fn softmax(scores: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::contract(format!(
            "softmax temperature must be finite and positive, got {tau}"
        )));
    }
    let (rows, cols) = scores.rows_cols();
    if cols == 0 {
        return Err(Error::shape("softmax", "empty last dimension".to_string()));
    }
    let mut out = vec![0.0; scores.numel()];
    softmax_rows(scores.data(), rows, cols, tau, &mut out);
    Tensor::new(scores.shape().to_vec(), out)
}

// ── shared numeric kernels ──
//
// All reductions below run in a fixed element order (dot products use a
// four-lane unrolled sum) so repeated runs are bit-identical.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    for j in chunks..n {
        s0 += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3)
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, tau: f64, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let m = xr.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = ((v - m) / tau).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}
