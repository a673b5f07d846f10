//! Dense row-major tensors.
//!
//! All numerics in the crate run in 64-bit floating point. Most tensors are
//! matrices (`[rows, cols]`); a scalar is a tensor of shape `[1]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix, or the leading extent otherwise.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent product, i.e. the row width of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let w = self.cols();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::dim(format!("row {i} out of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), w, data)
    }

    /// Contiguous row range `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.rows() {
            return Err(Error::dim(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows()
            )));
        }
        let w = self.cols();
        Tensor::matrix(end - start, w, self.data[start * w..end * w].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if !self.is_matrix() {
            return Err(Error::dim(format!(
                "{what} must be a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, false, other, false)
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// General matrix product with optional transposition of either operand.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.expect_matrix("left operand")?;
    let (br, bc) = b.expect_matrix("right operand")?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "inner dimensions disagree: [{m}x{k}] · [{k2}x{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: the strides describe exactly the row-major buffers of `a`, `b`
    // and `out`, whose lengths were validated against their shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_column() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(eye.matmul(&col).unwrap(), col);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn zero_left_operand() {
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn inner_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let at = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(gemm(&a, true, &b, false).unwrap(), at.matmul(&b).unwrap());
        assert_eq!(gemm(&b, false, &at, true).unwrap(), b.matmul(&a).unwrap());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }
}
