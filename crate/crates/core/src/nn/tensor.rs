use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of reals.
///
/// Rows are samples, columns are features. Constructors reject non-finite
/// entries; arithmetic helpers do not re-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::new",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor2::new"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor without the finiteness scan. Length is still checked.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Tensor2 length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Tensor2::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor2) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_shape(&self, other: &Tensor2, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    /// `self · otherᵀ`, the layer product for row-major batches and
    /// `(out × in)` weight matrices.
    pub fn matmul_transposed(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_transposed", self.cols, other.cols));
        }
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(Tensor2::from_raw(self.rows, other.rows, out))
    }

    /// `selfᵀ · other`; used for weight gradients (`δᵀ · a`).
    pub fn transpose_matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::shape("transpose_matmul", self.rows, other.rows));
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(Tensor2::from_raw(self.cols, other.cols, out))
    }

    /// Plain `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.cols, other.rows));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let dst = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in self.row(i).iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (d, &bkj) in dst.iter_mut().zip(other.row(k)) {
                    *d += aik * bkj;
                }
            }
        }
        Ok(Tensor2::from_raw(self.rows, other.cols, out))
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor2::from_raw(self.cols, self.rows, out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor2::from_raw(idx.len(), self.cols, out)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Vec::with_capacity(self.rows * idx.len());
        for r in self.iter_rows() {
            out.extend(idx.iter().map(|&j| r[j]));
        }
        Tensor2::from_raw(self.rows, idx.len(), out)
    }

    /// Column concatenation `[self | other]`.
    pub fn hstack(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::shape("hstack", self.rows, other.rows));
        }
        let mut out = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.rows {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Ok(Tensor2::from_raw(self.rows, self.cols + other.cols, out))
    }

    /// Row concatenation.
    pub fn vstack(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols && self.rows != 0 && other.rows != 0 {
            return Err(Error::shape("vstack", self.cols, other.cols));
        }
        let cols = if self.rows == 0 { other.cols } else { self.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor2::from_raw(self.rows + other.rows, cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        self.ensure_shape(other, "zip_map")?;
        Ok(Tensor2::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor2 {
        self.map(|v| v * k)
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in r.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Column sums (batch reduction of a bias gradient).
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Tensor2::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor2::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn products_agree() {
        let a = Tensor2::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor2::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        assert_eq!(a.matmul_transposed(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().transpose_matmul(&b).unwrap(), ab);
    }

    #[test]
    fn stacking_and_selection() {
        let a = Tensor2::new(2, 1, vec![1., 2.]).unwrap();
        let b = Tensor2::new(2, 2, vec![3., 4., 5., 6.]).unwrap();
        let h = a.hstack(&b).unwrap();
        assert_eq!(h.data(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(h.select_cols(&[1, 2]), b);
        assert_eq!(h.select_rows(&[1]).data(), &[2., 5., 6.]);
        assert_eq!(h.argmax_rows(), vec![2, 2]);
    }
}
