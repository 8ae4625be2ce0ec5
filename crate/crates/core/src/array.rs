//! Dense row-major `f64` arrays and the numeric kernels shared by the tape
//! and the value-only evaluation paths.
//!
//! Both paths call the same kernels, so a value computed on a recording tape
//! is bit-identical to the one computed without a tape.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Incompatible {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

/// Real-valued tensor. `shape == []` is a scalar.
#[derive(Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for DenseArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseArray")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ArrayError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ArrayError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional array.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ArrayError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar_like(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, ArrayError> {
        Self::new(shape, self.data)
    }

    pub fn flatten(&self) -> Self {
        Self::vector(self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_same(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, ArrayError> {
        if self.shape != other.shape {
            return Err(ArrayError::Incompatible {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, ArrayError> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ArrayError> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Elementwise product; either side may be a one-element array.
    pub fn mul(&self, other: &Self) -> Result<Self, ArrayError> {
        if self.shape == other.shape {
            return self.zip_same(other, "mul", |a, b| a * b);
        }
        if self.is_scalar_like() {
            let s = self.data[0];
            return Ok(other.map(|v| s * v));
        }
        if other.is_scalar_like() {
            let s = other.data[0];
            return Ok(self.map(|v| v * s));
        }
        Err(ArrayError::Incompatible {
            op: "mul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-abs difference between two same-shaped arrays.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Row `r` of a `[rows, last_dim]` view.
    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    /// Stack equally shaped arrays along a new leading axis.
    pub fn stack(parts: &[DenseArray]) -> Result<Self, ArrayError> {
        let first = parts.first().map(|p| p.shape.clone()).unwrap_or_default();
        let mut data = Vec::with_capacity(parts.len() * first.iter().product::<usize>());
        for p in parts {
            if p.shape != first {
                return Err(ArrayError::Incompatible {
                    op: "stack",
                    lhs: first,
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(first);
        Ok(Self { shape, data })
    }
}

pub(crate) mod kernels {
    //! Raw kernels. Callers validate shapes first.

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aik = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        out
    }

    /// `y[r, j] = sum_k x[r, k] * w[j, k] (+ b[j])` with `w: [out, inp]`.
    /// Each output accumulates over `k` in increasing order.
    pub fn affine(
        w: &[f64],
        x: &[f64],
        b: Option<&[f64]>,
        rows: usize,
        inp: usize,
        out: usize,
    ) -> Vec<f64> {
        // w^T, so the inner loop runs over contiguous outputs
        let mut wt = vec![0.0; inp * out];
        for j in 0..out {
            for k in 0..inp {
                wt[k * out + j] = w[j * inp + k];
            }
        }
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let yr = &mut y[r * out..(r + 1) * out];
            for (k, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
                for (o, &wv) in yr.iter_mut().zip(&wt[k * out..(k + 1) * out]) {
                    *o += xv * wv;
                }
            }
            if let Some(b) = b {
                for (o, &bv) in yr.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        y
    }

    /// Gradients of `affine` given the upstream gradient `gy: [rows, out]`.
    /// Returns `(gx, gw, gb)`.
    pub fn affine_backward(
        w: &[f64],
        x: &[f64],
        gy: &[f64],
        rows: usize,
        inp: usize,
        out: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; rows * inp];
        let mut gw = vec![0.0; out * inp];
        let mut gb = vec![0.0; out];
        for r in 0..rows {
            let xr = &x[r * inp..(r + 1) * inp];
            let gxr = &mut gx[r * inp..(r + 1) * inp];
            for j in 0..out {
                let g = gy[r * out + j];
                if g == 0.0 {
                    continue;
                }
                gb[j] += g;
                let wj = &w[j * inp..(j + 1) * inp];
                let gwj = &mut gw[j * inp..(j + 1) * inp];
                for k in 0..inp {
                    gxr[k] += g * wj[k];
                    gwj[k] += g * xr[k];
                }
            }
        }
        (gx, gw, gb)
    }

    pub fn tanh(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.tanh()).collect()
    }

    pub fn clamp(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        x.iter().map(|v| v.clamp(lo, hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_broadcast_in_mul() {
        let s = DenseArray::scalar(2.0);
        let v = DenseArray::vector(vec![1.0, -3.0]);
        assert_eq!(s.mul(&v).unwrap().data(), &[2.0, -6.0]);
        assert_eq!(v.mul(&s).unwrap().data(), &[2.0, -6.0]);
        assert!(v.mul(&DenseArray::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn affine_matches_matmul_plus_bias() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2, 3]
        let x = [1.0, 0.5, -1.0];
        let y = kernels::affine(&w, &x, Some(&[0.1, 0.2]), 1, 3, 2);
        assert!((y[0] - (1.0 + 1.0 - 3.0 + 0.1)).abs() < 1e-15);
        assert!((y[1] - (4.0 + 2.5 - 6.0 + 0.2)).abs() < 1e-15);
        // w^T as [3, 2] times x as [1, 3]
        let wt = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mm = kernels::matmul(&x, &wt, 1, 3, 2);
        assert!((mm[0] + 0.1 - y[0]).abs() < 1e-15);
    }
}
