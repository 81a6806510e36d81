//! Dense row-major f64 tensors and the handful of kernels shared by the
//! tape executor and the direct (inference) evaluation path.
//!
//! Keeping one set of kernels for both paths makes replayed computations
//! bit-for-bit reproducible regardless of which path produced a value.

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals, row-major.
///
/// Invariants: `data.len() == shape.iter().product()` and every entry is
/// finite. Both are enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::invalid("Tensor::new", "zero-sized dimension"));
        }
        if data.len() != numel {
            return Err(Error::shape("Tensor::new", &[numel], &[data.len()]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Tensor::new".into(),
            });
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

    /// Construct without the finiteness scan. For internal hot paths whose
    /// inputs are already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("Tensor::from_rows", "no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows when viewed as a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels. All operate on raw slices with explicit dimensions; callers have
// already validated shapes.
// ---------------------------------------------------------------------------

/// out[n x m] = a[n x k] . b[k x m]
pub(crate) fn matmul_into(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[n x k] += c[n x m] . b[k x m]^T   (dA for matmul backward)
pub(crate) fn matmul_bt_acc(n: usize, m: usize, k: usize, c: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let c_row = &c[i * m..(i + 1) * m];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (&cv, &bv) in c_row.iter().zip(b_row) {
                acc += cv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k x m] += a[n x k]^T . c[n x m]   (dB for matmul backward)
pub(crate) fn matmul_at_acc(n: usize, k: usize, m: usize, a: &[f64], c: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
}

/// Row-wise numerically stable softmax: subtract the row max before exp.
pub(crate) fn softmax_rows_into(n: usize, m: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let o = &mut out[i * m..(i + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *ov = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for ov in o.iter_mut() {
            *ov *= inv;
        }
    }
}

pub(crate) fn leaky_relu_into(x: &[f64], slope: f64, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { slope * v };
    }
}

/// x[n x m] + bias[m], broadcast over rows.
pub(crate) fn add_bias_into(n: usize, m: usize, x: &[f64], bias: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let o = &mut out[i * m..(i + 1) * m];
        for ((ov, &xv), &bv) in o.iter_mut().zip(row).zip(bias) {
            *ov = xv + bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [3.0, -1.0, 2.0, 7.0];
        let mut out = [0.0; 4];
        matmul_into(2, 2, 2, &a, &b, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = [0.0; 4];
        let mut out = [0.0; 4];
        softmax_rows_into(1, 4, &x, &mut out);
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
