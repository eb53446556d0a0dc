//! Dense row-major 2-D arrays of `f64` and the handful of kernels the model needs.

use crate::error::NumericError;

/// Dense 2-D array of 64-bit reals, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(format!(
                "from_vec entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericError::Shape {
                    op: "from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Single-row tensor.
    pub fn row_vector(values: &[f64]) -> Result<Self, NumericError> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    /// Wraps data without the finiteness scan. Used on hot paths where the
    /// inputs were already validated.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<(), NumericError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericError::NonFinite(context.to_string()))
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.cols != other.rows {
            return Err(NumericError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out = matmul_raw(self, other);
        out.ensure_finite("matmul output")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn sigmoid(&self) -> Tensor2 {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor2 {
        self.map(f64::tanh)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    fn zip_with(
        &self,
        other: &Tensor2,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2, NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Which pointwise operation [`elementwise`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Sigmoid,
    Tanh,
    Hadamard,
    Add,
}

/// Dispatches one of the pointwise operations. Unary ops ignore `rhs`;
/// binary ops require it with a matching shape.
pub fn elementwise(
    op: ElementwiseOp,
    lhs: &Tensor2,
    rhs: Option<&Tensor2>,
) -> Result<Tensor2, NumericError> {
    match op {
        ElementwiseOp::Sigmoid => Ok(lhs.sigmoid()),
        ElementwiseOp::Tanh => Ok(lhs.tanh()),
        ElementwiseOp::Hadamard | ElementwiseOp::Add => {
            let rhs = rhs.ok_or(NumericError::MissingOperand)?;
            if op == ElementwiseOp::Add {
                lhs.add(rhs)
            } else {
                lhs.hadamard(rhs)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax restricted to the entries where `mask` is true. Masked-out
/// entries come back as exactly zero.
pub fn softmax_masked(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>, NumericError> {
    if scores.len() != mask.len() {
        return Err(NumericError::Shape {
            op: "softmax_masked",
            lhs: (scores.len(), 1),
            rhs: (mask.len(), 1),
        });
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericError::EmptySupport);
    }
    if !max.is_finite() {
        return Err(NumericError::NonFinite("softmax_masked scores".into()));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// `a · b` without shape or finiteness checks. The accumulation order for
/// each output entry depends only on its own row of `a`.
pub(crate) fn matmul_raw(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Tensor2::zeros(a.rows, b.cols);
    gemm(&mut out, 0.0, a, false, b, false);
    out
}

/// `acc += a · bᵀ`
pub(crate) fn matmul_nt_acc(acc: &mut Tensor2, a: &Tensor2, b: &Tensor2) {
    debug_assert_eq!(a.cols, b.cols);
    gemm(acc, 1.0, a, false, b, true);
}

/// `acc += aᵀ · b`
pub(crate) fn matmul_tn_acc(acc: &mut Tensor2, a: &Tensor2, b: &Tensor2) {
    debug_assert_eq!(a.rows, b.rows);
    gemm(acc, 1.0, a, true, b, false);
}

/// `c = beta·c + op(a)·op(b)` on row-major storage; a transpose is just a
/// stride swap. Every output entry accumulates over the inner index in the
/// same order whatever its row, which keeps batched rows independent.
fn gemm(c: &mut Tensor2, beta: f64, a: &Tensor2, ta: bool, b: &Tensor2, tb: bool) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: the shapes checked above bound every index the kernel forms
    // from these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
