use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows, Tensor, NORM_FLOOR,
};

/// Handle to a value on a [`Tape`]; only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(usize);

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;

// ── recorded operations ──

enum Op {
    /// Constant or parameter; nothing to backpropagate into.
    Leaf,
    /// `a @ b`
    MatMul { a: ValId, b: ValId },
    /// `a @ b^T`
    MatMulNt { a: ValId, b: ValId },
    /// Elementwise sum of same-shape tensors.
    Add { a: ValId, b: ValId },
    /// Matrix plus a broadcast row vector.
    AddRow { a: ValId, b: ValId },
    /// Elementwise product.
    Mul { a: ValId, b: ValId },
    /// Multiplication by a compile-time constant.
    Scale { a: ValId, c: f64 },
    /// Tanh-approximation GELU.
    Gelu { a: ValId },
    /// Per-row layer norm with learned gain and bias.
    LayerNorm { x: ValId, gamma: ValId, beta: ValId },
    /// Row-wise softmax (unit temperature).
    SoftmaxRows { a: ValId },
    /// Rows rescaled to unit L2 norm; input norms are saved for backward.
    NormalizeRows { a: ValId, norms: Vec<f64> },
    /// Matrix transpose.
    Transpose { a: ValId },
    /// Stack matrices with equal column counts.
    ConcatRows { parts: Vec<ValId> },
    /// Contiguous row range.
    SliceRows { a: ValId, start: usize },
    /// Stack matrices with equal row counts side by side.
    ConcatCols { parts: Vec<ValId> },
    /// Contiguous column range.
    SliceCols { a: ValId, start: usize },
    /// Same data, different shape.
    Reshape { a: ValId },
    /// Row gather from an embedding table; repeated ids accumulate grads.
    EmbedRows { table: ValId, ids: Vec<usize> },
    /// Sum of all elements.
    SumAll { a: ValId },
    /// Mean of all elements.
    MeanAll { a: ValId },
    /// Mean cross-entropy of row-softmaxed logits against integer labels.
    /// Softmax probabilities are saved for backward.
    CrossEntropyMean {
        logits: ValId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Named gradients produced by [`Tape::backward`], in sorted-name order.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Eager evaluation trace: each operation computes its value immediately and
/// records what it needs for the reverse sweep. Node `i` is produced by
/// operation `i`, so one reverse pass over the vector is a valid topological
/// order.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    params: Vec<(String, ValId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    fn push(&mut self, t: Tensor, op: Op) -> ValId {
        self.vals.push(t);
        self.ops.push(op);
        ValId(self.vals.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> ValId {
        self.push(t, Op::Leaf)
    }

    /// Leaf whose gradient is reported by name from [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<ValId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!(
                "parameter {name:?} registered twice on one tape"
            )));
        }
        let id = self.push(t, Op::Leaf);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    fn dims2(&self, op: &'static str, id: ValId) -> Result<(usize, usize)> {
        let t = self.value(id);
        match t.rank() {
            1 => Ok((1, t.shape()[0])),
            2 => Ok((t.shape()[0], t.shape()[1])),
            r => Err(Error::shape(
                op,
                format!("expected rank 1 or 2, got rank {r} {:?}", t.shape()),
            )),
        }
    }

    fn matrix(&self, op: &'static str, id: ValId) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ── operations ──

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: [{m},{k}] @ [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dims differ: [{m},{k}] @ [{n},{k2}]^T"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (rows, cols) = self.dims2("add_row", a)?;
        let bt = self.value(b);
        if bt.rank() != 1 || bt.shape()[0] != cols {
            return Err(Error::shape(
                "add_row",
                format!("row must be [{cols}], got {:?}", bt.shape()),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { a, b }))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> Result<ValId> {
        let t = self.value(a).scale(c);
        Ok(self.push(t, Op::Scale { a, c }))
    }

    pub fn gelu(&mut self, a: ValId) -> Result<ValId> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu { a }))
    }

    pub fn layer_norm(&mut self, x: ValId, gamma: ValId, beta: ValId) -> Result<ValId> {
        let (rows, cols) = self.dims2("layer_norm", x)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(id);
            if t.rank() != 1 || t.shape()[0] != cols {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} must be [{cols}], got {:?}", t.shape()),
                ));
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_moments(xr);
            for j in 0..cols {
                or[j] = g[j] * ((xr[j] - mean) * inv_std) + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn softmax_rows(&mut self, a: ValId) -> Result<ValId> {
        let (rows, cols) = self.dims2("softmax_rows", a)?;
        if cols == 0 {
            return Err(Error::shape("softmax_rows", "empty rows".to_string()));
        }
        let mut out = vec![0.0; rows * cols];
        softmax_rows(self.value(a).data(), rows, cols, 1.0, &mut out);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { a }))
    }

    pub fn normalize_rows(&mut self, a: ValId) -> Result<ValId> {
        let (rows, cols) = self.dims2("normalize_rows", a)?;
        let xd = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let n = dot(xr, xr).sqrt();
            if n < NORM_FLOOR {
                return Err(Error::contract(format!(
                    "normalize_rows: row {r} has near-zero norm {n:.3e}"
                )));
            }
            let inv = 1.0 / n;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = v * inv;
            }
            norms.push(n);
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { a, norms }))
    }

    pub fn transpose(&mut self, a: ValId) -> Result<ValId> {
        let (m, n) = self.matrix("transpose", a)?;
        let xd = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { a }))
    }

    pub fn concat_rows(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let (_, cols) = self.matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        let (rows, cols) = self.matrix("slice_rows", a)?;
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + len),
            ));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let (rows, _) = self.matrix("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut at = 0;
        for &p in parts {
            let (_, c) = self.matrix("concat_cols", p)?;
            let pd = self.value(p).data();
            for r in 0..rows {
                data[r * cols + at..r * cols + at + c].copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            at += c;
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        let (rows, cols) = self.matrix("slice_cols", a)?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of 0..{cols}", start + len),
            ));
        }
        let xd = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { a, start }))
    }

    pub fn reshape(&mut self, a: ValId, shape: Vec<usize>) -> Result<ValId> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn embed_rows(&mut self, table: ValId, ids: &[usize]) -> Result<ValId> {
        let (rows, cols) = self.matrix("embed_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "embed_rows: id {bad} out of table range 0..{rows}"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: ValId) -> Result<ValId> {
        let mut s = 0.0;
        for &v in self.value(a).data() {
            s += v;
        }
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: ValId) -> Result<ValId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let mut s = 0.0;
        for &v in self.value(a).data() {
            s += v;
        }
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanAll { a }))
    }

    /// Mean cross-entropy over rows of `logits` with one integer label per
    /// row, computed via the log-sum-exp identity.
    pub fn cross_entropy_mean(&mut self, logits: ValId, labels: &[usize]) -> Result<ValId> {
        let (rows, cols) = self.matrix("cross_entropy_mean", logits)?;
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::contract(format!(
                "cross_entropy_mean: label {bad} out of range 0..{cols}"
            )));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        softmax_rows(xd, rows, cols, 1.0, &mut probs);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let xr = &xd[r * cols..(r + 1) * cols];
            let m = xr.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut lse = 0.0;
            for &v in xr {
                lse += ((v - m) / 1.0).exp();
            }
            loss += m + lse.ln() - xr[label];
        }
        loss /= rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── reverse sweep ──

    /// Gradients of a scalar loss with respect to every registered
    /// parameter. Parameters with no path to the loss get zero gradients;
    /// accumulation order is fixed by the (deterministic) tape order.
    pub fn backward(&self, loss: ValId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for parameter extraction
                }
                Op::MatMul { a, b } => {
                    let (m, k) = mat_dims(self.value(*a));
                    let n = self.value(*b).shape()[1];
                    let bd = self.value(*b).data();
                    matmul_nt_acc(&g, bd, acc(&mut grads, *a, m * k), m, n, k);
                    let ad = self.value(*a).data();
                    matmul_tn_acc(ad, &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = mat_dims(self.value(*a));
                    let n = self.value(*b).shape()[0];
                    let bd = self.value(*b).data();
                    matmul_acc(&g, bd, acc(&mut grads, *a, m * k), m, n, k);
                    let ad = self.value(*a).data();
                    matmul_tn_acc(&g, ad, acc(&mut grads, *b, n * k), m, n, k);
                }
                Op::Add { a, b } => {
                    axpy(acc(&mut grads, *a, g.len()), &g, 1.0);
                    axpy(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::AddRow { a, b } => {
                    axpy(acc(&mut grads, *a, g.len()), &g, 1.0);
                    let cols = self.value(*b).numel();
                    let gb = acc(&mut grads, *b, cols);
                    for row in g.chunks_exact(cols) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let bd = self.value(*b).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, &gv), &bv) in ga.iter_mut().zip(&g).zip(bd) {
                        *o += gv * bv;
                    }
                    let ad = self.value(*a).data();
                    let gb = acc(&mut grads, *b, g.len());
                    for ((o, &gv), &av) in gb.iter_mut().zip(&g).zip(ad) {
                        *o += gv * av;
                    }
                }
                Op::Scale { a, c } => {
                    axpy(acc(&mut grads, *a, g.len()), &g, *c);
                }
                Op::Gelu { a } => {
                    let xd = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, &gv), &x) in ga.iter_mut().zip(&g).zip(xd) {
                        *o += gv * gelu_deriv(x);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    self.layer_norm_backward(&g, *x, *gamma, *beta, &mut grads);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.vals[i].data();
                    let cols = self.value(*a).last_dim();
                    let ga = acc(&mut grads, *a, g.len());
                    for r in 0..g.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let s = dot(gr, yr);
                        for ((o, &yv), &gv) in ga[span].iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - s);
                        }
                    }
                }
                Op::NormalizeRows { a, norms } => {
                    let y = self.vals[i].data();
                    let cols = self.value(*a).last_dim();
                    let ga = acc(&mut grads, *a, g.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let s = dot(gr, yr);
                        let inv = 1.0 / n;
                        for ((o, &gv), &yv) in ga[span].iter_mut().zip(gr).zip(yr) {
                            *o += (gv - s * yv) * inv;
                        }
                    }
                }
                Op::Transpose { a } => {
                    let (m, n) = mat_dims(self.value(*a));
                    let ga = acc(&mut grads, *a, m * n);
                    // g is [n, m]
                    for j in 0..n {
                        for i2 in 0..m {
                            ga[i2 * n + j] += g[j * m + i2];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let sz = self.value(p).numel();
                        axpy(acc(&mut grads, p, sz), &g[at..at + sz], 1.0);
                        at += sz;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (_, cols) = mat_dims(self.value(*a));
                    let numel = self.value(*a).numel();
                    let ga = acc(&mut grads, *a, numel);
                    axpy(&mut ga[start * cols..start * cols + g.len()], &g, 1.0);
                }
                Op::ConcatCols { parts } => {
                    let rows = self.value(parts[0]).shape()[0];
                    let total: usize = g.len() / rows;
                    let mut at = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        let gp = acc(&mut grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + at + j];
                            }
                        }
                        at += c;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = mat_dims(self.value(*a));
                    let len = g.len() / rows;
                    let ga = acc(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::Reshape { a } => {
                    axpy(acc(&mut grads, *a, g.len()), &g, 1.0);
                }
                Op::EmbedRows { table, ids } => {
                    let cols = self.value(*table).shape()[1];
                    let numel = self.value(*table).numel();
                    let gt = acc(&mut grads, *table, numel);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        for (o, &v) in gt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let numel = self.value(*a).numel();
                    let ga = acc(&mut grads, *a, numel);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanAll { a } => {
                    let numel = self.value(*a).numel();
                    let gv = g[0] / numel as f64;
                    let ga = acc(&mut grads, *a, numel);
                    for o in ga.iter_mut() {
                        *o += gv;
                    }
                }
                Op::CrossEntropyMean {
                    logits,
                    labels,
                    probs,
                } => {
                    let cols = self.value(*logits).last_dim();
                    let rows = labels.len();
                    let scale = g[0] / rows as f64;
                    let gl = acc(&mut grads, *logits, rows * cols);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..cols {
                            let ind = if j == label { 1.0 } else { 0.0 };
                            gl[r * cols + j] += (probs[r * cols + j] - ind) * scale;
                        }
                    }
                }
            }
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.value(*id).shape().to_vec();
            let data = match grads[id.0].take() {
                Some(v) => v,
                None => vec![0.0; self.value(*id).numel()],
            };
            map.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients { map })
    }

    fn layer_norm_backward(
        &self,
        g: &[f64],
        x: ValId,
        gamma: ValId,
        beta: ValId,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xt = self.value(x);
        let cols = xt.last_dim();
        let rows = xt.numel() / cols;
        let xd = xt.data();
        let gam = self.value(gamma).data();

        // accumulate into gamma/beta first, then x, row by row
        let mut xhat = vec![0.0; cols];
        let mut h = vec![0.0; cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let gr = &g[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_moments(xr);
            for j in 0..cols {
                xhat[j] = (xr[j] - mean) * inv_std;
                h[j] = gam[j] * gr[j];
            }
            let mean_h = h.iter().sum::<f64>() / cols as f64;
            let mean_hx = dot(&h, &xhat) / cols as f64;
            {
                let gx = acc(grads, x, rows * cols);
                for j in 0..cols {
                    gx[r * cols + j] += (h[j] - mean_h - xhat[j] * mean_hx) * inv_std;
                }
            }
            {
                let gg = acc(grads, gamma, cols);
                for j in 0..cols {
                    gg[j] += gr[j] * xhat[j];
                }
            }
            {
                let gb = acc(grads, beta, cols);
                for j in 0..cols {
                    gb[j] += gr[j];
                }
            }
        }
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    let cols = t.last_dim();
    (t.numel() / cols, cols)
}

fn acc(grads: &mut [Option<Vec<f64>>], id: ValId, numel: usize) -> &mut [f64] {
    grads[id.0]
        .get_or_insert_with(|| vec![0.0; numel])
        .as_mut_slice()
}

fn axpy(out: &mut [f64], x: &[f64], c: f64) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

fn row_moments(xr: &[f64]) -> (f64, f64) {
    let n = xr.len() as f64;
    let mean = xr.iter().sum::<f64>() / n;
    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}
