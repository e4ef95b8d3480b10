//! Dense row-major `f64` matrices and a small binary tensor container.
//!
//! Everything numeric in this crate flows through [`Matrix`]: token grids,
//! prior batches, MLP weights, gradients. The type is deliberately minimal —
//! just the operations the fusion math and the toy model need, implemented
//! with plain loops so the arithmetic order is fixed and results are
//! reproducible bit-for-bit across runs.
//!
//! The on-disk container (`TNSR`) stores one tensor per file:
//!
//! ```text
//! magic "TNSR" | rank: u8 | dims: u32 LE × rank | payload: f64 LE, row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from tensor construction and the `TNSR` container.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {rows}x{cols} does not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("dimension mismatch: {context} (left {left:?}, right {right:?})")]
    DimMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("bad magic: expected \"TNSR\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("tensor rank {0} out of supported range 1..=4")]
    BadRank(u8),
    #[error("tensor payload truncated: expected {expected} values, file holds {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor dimensions overflow usize: {0:?}")]
    DimOverflow(Vec<u32>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a row-major buffer; the buffer length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { rows, cols, len: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build element-wise from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other` (standard matrix product).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::DimMismatch {
                context: "matmul inner dimensions",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::DimMismatch {
                context: "matmul_tn inner dimensions",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let srow = self.row(k);
            let orow = other.row(k);
            for (i, &a) in srow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::DimMismatch {
                context: "matmul_nt inner dimensions",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let srow = self.row(i);
            for j in 0..other.rows {
                let orow = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in srow.iter().zip(orow) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        if self.cols != v.len() {
            return Err(TensorError::DimMismatch {
                context: "matvec inner dimensions",
                left: (self.rows, self.cols),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&a, &b) in self.row(i).iter().zip(v) {
                acc += a * b;
            }
            *o = acc;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Element-wise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element-wise combination of two same-shape matrices.
    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::DimMismatch {
                context: "zip_map shapes",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        Ok(Matrix {
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

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::DimMismatch {
                context: "axpy shapes",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Sum over rows: returns a `cols`-length vector of column sums.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], expected: usize, got: usize) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorError::Truncated { expected, actual: got }
        } else {
            TensorError::Io(e)
        }
    })
}

/// Write a tensor in the `TNSR` container layout.
pub fn write_tensor(w: &mut impl Write, dims: &[usize], data: &[f64]) -> Result<(), TensorError> {
    assert!(
        (1..=4).contains(&dims.len()),
        "tensor rank must be 1..=4, got {}",
        dims.len()
    );
    let count: usize = dims.iter().product();
    assert_eq!(count, data.len(), "dims {:?} disagree with payload length {}", dims, data.len());
    w.write_all(b"TNSR")?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor from the `TNSR` container layout.
pub fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, 4, 0)?;
    if &magic != b"TNSR" {
        return Err(TensorError::BadMagic { found: magic });
    }
    let mut rank_buf = [0u8; 1];
    read_exact_or_truncated(r, &mut rank_buf, 1, 0)?;
    let rank = rank_buf[0];
    if !(1..=4).contains(&rank) {
        return Err(TensorError::BadRank(rank));
    }
    let mut dims_u32 = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact_or_truncated(r, &mut b, rank as usize, dims_u32.len())?;
        dims_u32.push(u32::from_le_bytes(b));
    }
    let mut count: usize = 1;
    for &d in &dims_u32 {
        count = count
            .checked_mul(d as usize)
            .ok_or_else(|| TensorError::DimOverflow(dims_u32.clone()))?;
    }
    let mut data = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for i in 0..count {
        read_exact_or_truncated(r, &mut b, count, i)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((dims_u32.into_iter().map(|d| d as usize).collect(), data))
}

/// Write one tensor to `path`.
pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f64]) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, dims, data)?;
    w.flush()?;
    Ok(())
}

/// Read one tensor from `path`.
pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Write a matrix as a rank-2 tensor file.
pub fn write_matrix_file(path: &Path, m: &Matrix) -> Result<(), TensorError> {
    write_tensor_file(path, &[m.rows(), m.cols()], m.data())
}

/// Read a rank-2 tensor file into a matrix.
pub fn read_matrix_file(path: &Path) -> Result<Matrix, TensorError> {
    let (dims, data) = read_tensor_file(path)?;
    if dims.len() != 2 {
        return Err(TensorError::BadRank(dims.len() as u8));
    }
    Matrix::from_vec(dims[0], dims[1], data)
}
