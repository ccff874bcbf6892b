//! Dense row-major tensors of `f64`.
//!
//! [`Tensor`] is a plain value type. Gradient tracking lives in
//! [`crate::autodiff::Graph`], which wraps tensors in recorded nodes.

mod io;
pub(crate) mod kernels;

pub use io::{decode_sttf, encode_sttf, encode_sttf_f32, load_sttf, save_sttf, STTF_MAGIC, STTF_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor; a rank-1 tensor is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::contract(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let cols = *self.shape.last().expect("non-empty shape");
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Dense product of two matrices, outside of any graph.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, p) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        kernels::gemm(m, k, p, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(&[m, p], out)
    }

    /// Selects rows by index, producing a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(&[idx.len(), c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Dimension { .. })));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul_is_exact() {
        let m = Tensor::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        let i = Tensor::identity(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&i).unwrap(), m);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }
}
