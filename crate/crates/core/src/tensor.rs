//! Minimal dense tensor substrate.
//!
//! [`Matrix`] is a row-major 2-D buffer; [`Tensor3`] is a 3-axis strided view
//! over shared storage. Reshapes and axis transposes only rewrite shape and
//! stride metadata, so a view and its source always observe the same values.
//! Materialization into fresh contiguous storage is always an explicit call.
//!
//! All products ([`matmul`], [`bmm`]) accumulate every output element as
//! `((0 + a0*x0) + a1*x1) + ...` with the reduction index ascending, whatever
//! the operand strides are. That makes results bit-reproducible against a
//! naive triple loop.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::distributions::uniform::SampleUniform;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + SampleUniform + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Width of the little-endian encoding in bytes.
    const BYTES: usize;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

thread_local! {
    static MULTIPLY_ADDS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds performed by [`bmm`]/[`matmul`] on the current thread since
/// the last [`reset_multiply_adds`].
pub fn multiply_adds() -> u64 {
    MULTIPLY_ADDS.with(|c| c.get())
}

pub fn reset_multiply_adds() {
    MULTIPLY_ADDS.with(|c| c.set(0));
}

fn record_multiply_adds(n: u64) {
    MULTIPLY_ADDS.with(|c| c.set(c.get() + n));
}

/// Floating-point operation count of a dense `f_out x f_in` layer applied to
/// `n_batch` columns. One multiply-add counts as two flops.
pub fn flop_count_dense(f_out: usize, f_in: usize, n_batch: usize) -> u64 {
    2 * f_out as u64 * f_in as u64 * n_batch as u64
}

/// Flops of a Dyad layer: two components, each a batched product over
/// `n_dyad` blocks of size `n_out x n_in`.
pub fn flop_count_dyad(n_dyad: usize, n_out: usize, n_in: usize, n_batch: usize) -> u64 {
    2 * (2 * n_dyad as u64 * n_out as u64 * n_in as u64 * n_batch as u64)
}

/// Row-major matrix with shared, immutable storage.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Arc<[T]>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape);
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: data.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::RaggedRows);
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            data: data.into(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| T::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r}, {c}) out of range"
        );
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Whether `other` shares this matrix's storage.
    pub fn shares_storage(&self, other: &Tensor3<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.buf)
    }

    /// `(1, rows, cols)` view over the same storage.
    pub fn view(&self) -> Tensor3<T> {
        Tensor3 {
            shape: [1, self.rows, self.cols],
            strides: [self.rows * self.cols, self.cols, 1],
            offset: 0,
            buf: Arc::clone(&self.data),
        }
    }

    /// Materialized transpose.
    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                axis: "shape",
                left: self.rows * self.cols,
                right: other.rows * other.cols,
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Adds a `rows x 1` column vector to every column.
    pub fn add_column(&self, col: &Self) -> Result<Self> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::DimensionMismatch {
                axis: "rows",
                left: self.rows,
                right: col.rows,
            });
        }
        Ok(Self::from_fn(self.rows, self.cols, |r, c| {
            self.get(r, c) + col.data[r]
        }))
    }

    /// `rows x 1` column of per-row sums, accumulated left to right.
    pub fn row_sums(&self) -> Self {
        Self::from_fn(self.rows, 1, |r, _| {
            self.row(r).iter().fold(T::zero(), |acc, &v| acc + v)
        })
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::EmptyShape);
        }
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self::new(self.rows, cols.len(), data)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

/// A 3-axis strided view over shared storage.
#[derive(Clone)]
pub struct Tensor3<T> {
    shape: [usize; 3],
    strides: [usize; 3],
    offset: usize,
    buf: Arc<[T]>,
}

impl<T: Scalar> Tensor3<T> {
    /// Contiguous tensor owning a fresh buffer.
    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::EmptyShape);
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            strides: contiguous_strides(shape),
            offset: 0,
            buf: data.into(),
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::from_vec(shape, vec![T::zero(); shape.iter().product()]).expect("positive shape")
    }

    /// View `len` elements of `buf` starting at `offset` as a contiguous tensor.
    pub(crate) fn view_of(buf: Arc<[T]>, offset: usize, shape: [usize; 3]) -> Self {
        debug_assert!(offset + shape.iter().product::<usize>() <= buf.len());
        Self {
            shape,
            strides: contiguous_strides(shape),
            offset,
            buf,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn strides(&self) -> [usize; 3] {
        self.strides
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        self.offset + i * self.strides[0] + j * self.strides[1] + k * self.strides[2]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        assert!(
            i < self.shape[0] && j < self.shape[1] && k < self.shape[2],
            "index ({i}, {j}, {k}) out of range for shape {:?}",
            self.shape
        );
        self.buf[self.index(i, j, k)]
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == contiguous_strides(self.shape)
    }

    pub fn shares_storage(&self, other: &Tensor3<T>) -> bool {
        Arc::ptr_eq(&self.buf, &other.buf)
    }

    /// Swap axes 0 and 1. Metadata only.
    pub fn transpose01(&self) -> Self {
        Self {
            shape: [self.shape[1], self.shape[0], self.shape[2]],
            strides: [self.strides[1], self.strides[0], self.strides[2]],
            offset: self.offset,
            buf: Arc::clone(&self.buf),
        }
    }

    /// Swap axes 1 and 2 (per-batch matrix transpose). Metadata only.
    pub fn transpose12(&self) -> Self {
        Self {
            shape: [self.shape[0], self.shape[2], self.shape[1]],
            strides: [self.strides[0], self.strides[2], self.strides[1]],
            offset: self.offset,
            buf: Arc::clone(&self.buf),
        }
    }

    /// Values in logical (row-major index) order.
    pub fn to_vec(&self) -> Vec<T> {
        if self.is_contiguous() {
            return self.buf[self.offset..self.offset + self.len()].to_vec();
        }
        let [d0, d1, d2] = self.shape;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..d0 {
            for j in 0..d1 {
                let base = self.index(i, j, 0);
                if self.strides[2] == 1 {
                    out.extend_from_slice(&self.buf[base..base + d2]);
                } else {
                    out.extend((0..d2).map(|k| self.buf[base + k * self.strides[2]]));
                }
            }
        }
        out
    }

    /// Copy into fresh contiguous storage.
    pub fn materialize(&self) -> Self {
        Self::from_vec(self.shape, self.to_vec()).expect("shape already validated")
    }

    /// Reshape a contiguous tensor. Zero-copy; fails on strided views.
    pub fn reshape(&self, shape: [usize; 3]) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: n,
            });
        }
        if !self.is_contiguous() {
            return Err(Error::NonContiguous);
        }
        Ok(Self::view_of(Arc::clone(&self.buf), self.offset, shape))
    }

    /// Flatten to a matrix. Zero-copy when contiguous, otherwise materializes.
    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        if rows * cols != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: rows * cols,
            });
        }
        if self.is_contiguous() && self.offset == 0 && self.buf.len() == self.len() {
            return Ok(Matrix {
                rows,
                cols,
                data: Arc::clone(&self.buf),
            });
        }
        Matrix::new(rows, cols, self.to_vec())
    }
}

impl<T: Scalar> fmt::Debug for Tensor3<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor3")
            .field("shape", &self.shape)
            .field("strides", &self.strides)
            .field("offset", &self.offset)
            .field("values", &self.to_vec())
            .finish()
    }
}

impl<T: Scalar> PartialEq for Tensor3<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_vec() == other.to_vec()
    }
}

fn contiguous_strides(shape: [usize; 3]) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

/// Zero-copy `(d0, d1, d2)` view of a row-major matrix.
pub fn reshape3<T: Scalar>(m: &Matrix<T>, d0: usize, d1: usize, d2: usize) -> Result<Tensor3<T>> {
    let n = d0 * d1 * d2;
    if n != m.rows * m.cols {
        return Err(Error::ShapeMismatch {
            expected: m.rows * m.cols,
            actual: n,
        });
    }
    if n == 0 {
        return Err(Error::EmptyShape);
    }
    Ok(Tensor3::view_of(Arc::clone(&m.data), 0, [d0, d1, d2]))
}

const TILE_BYTES: usize = 16 * 1024;

/// Batched product: `out[b] = a[b] * x[b]` for `a: (B, M, K)`, `x: (B, K, N)`.
/// Either operand may be a strided view; the result is contiguous.
pub fn bmm<T: Scalar>(a: &Tensor3<T>, x: &Tensor3<T>) -> Result<Tensor3<T>> {
    let [batch, m, k] = a.shape;
    let [xb, xk, n] = x.shape;
    if batch != xb {
        return Err(Error::DimensionMismatch {
            axis: "batch",
            left: batch,
            right: xb,
        });
    }
    if k != xk {
        return Err(Error::DimensionMismatch {
            axis: "inner",
            left: k,
            right: xk,
        });
    }
    record_multiply_adds((batch * m * k * n) as u64);

    // Row-update form needs unit stride along n; repacking x costs one pass.
    let packed;
    let x = if x.strides[2] == 1 || n == 1 {
        x
    } else {
        packed = x.materialize();
        &packed
    };

    let mut out = vec![T::zero(); batch * m * n];
    let (abuf, xbuf) = (&a.buf[..], &x.buf[..]);
    let [as0, as1, as2] = a.strides;
    let [xs0, xs1, _] = x.strides;

    // Row tiles keep the output tile and the current x row in L1. Every
    // output element still sums in ascending k from zero.
    let tile = (TILE_BYTES / (n.max(1) * T::BYTES)).clamp(1, m.max(1));
    for b in 0..batch {
        let block = &mut out[b * m * n..(b + 1) * m * n];
        for (t, rows) in block.chunks_mut(tile * n).enumerate() {
            let a_base = a.offset + b * as0 + t * tile * as1;
            for kk in 0..k {
                let x_row = x.offset + b * xs0 + kk * xs1;
                let xr = &xbuf[x_row..x_row + n];
                for (i, row) in rows.chunks_exact_mut(n).enumerate() {
                    let av = abuf[a_base + i * as1 + kk * as2];
                    for (o, &xv) in row.iter_mut().zip(xr) {
                        *o = *o + av * xv;
                    }
                }
            }
        }
    }
    Tensor3::from_vec([batch, m, n], out)
}

/// Standard matrix product `a * x`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != x.rows {
        return Err(Error::DimensionMismatch {
            axis: "inner",
            left: a.cols,
            right: x.rows,
        });
    }
    bmm(&a.view(), &x.view())?.to_matrix(a.rows, x.cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |r, c| (r * cols + c) as f64)
    }

    #[test]
    fn reshape_column_into_blocks() {
        let m = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = reshape3(&m, 2, 2, 1).unwrap();
        assert_eq!(t.strides(), [2, 1, 1]);
        assert_eq!((t.get(0, 0, 0), t.get(0, 1, 0)), (1.0, 2.0));
        assert_eq!((t.get(1, 0, 0), t.get(1, 1, 0)), (3.0, 4.0));
        assert!(m.shares_storage(&t));
    }

    #[test]
    fn reshape_single_element() {
        let m = Matrix::new(1, 1, vec![7.5f32]).unwrap();
        let t = reshape3(&m, 1, 1, 1).unwrap();
        assert_eq!(t.get(0, 0, 0), 7.5);
    }

    #[test]
    fn reshape_matches_row_major_formula() {
        let m = seq(6, 2);
        let t = reshape3(&m, 3, 2, 2).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(t.get(i, j, k), (4 * i + 2 * j + k) as f64);
                }
            }
        }
    }

    #[test]
    fn reshape_rejects_wrong_size() {
        let m = seq(6, 2);
        assert!(matches!(
            reshape3(&m, 2, 2, 2),
            Err(Error::ShapeMismatch {
                expected: 12,
                actual: 8
            })
        ));
    }

    #[test]
    fn transpose01_swaps_metadata() {
        let t = reshape3(&seq(6, 1), 2, 3, 1).unwrap();
        assert_eq!(t.strides(), [3, 1, 1]);
        let tt = t.transpose01();
        assert_eq!(tt.shape(), [3, 2, 1]);
        assert_eq!(tt.strides(), [1, 3, 1]);
        assert!(tt.shares_storage(&t));
        assert_eq!(tt.transpose01().to_vec(), t.to_vec());
    }

    #[test]
    fn transpose01_flatten_is_stride_permutation() {
        let m = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = reshape3(&m, 2, 2, 1).unwrap().transpose01();
        assert_eq!(t.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(
            t.to_matrix(4, 1).unwrap().to_vec(),
            vec![1.0, 3.0, 2.0, 4.0]
        );
    }

    #[test]
    fn bmm_worked_example() {
        let a = Tensor3::from_vec([2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let x = Tensor3::from_vec([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bmm(&a, &x).unwrap();
        assert_eq!(y.shape(), [2, 1, 1]);
        assert_eq!(y.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn bmm_identity_and_zeros() {
        let x = reshape3(&seq(12, 1), 3, 2, 2).unwrap();
        let eye: Vec<f64> = (0..3).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
        let eye = Tensor3::from_vec([3, 2, 2], eye).unwrap();
        assert_eq!(bmm(&eye, &x).unwrap().to_vec(), x.to_vec());

        let z = Tensor3::<f64>::zeros([3, 4, 2]);
        let out = bmm(&z, &x).unwrap();
        assert_eq!(out.shape(), [3, 4, 2]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bmm_names_offending_axis() {
        let a = Tensor3::<f64>::zeros([2, 3, 4]);
        let x = Tensor3::<f64>::zeros([3, 4, 1]);
        assert!(matches!(
            bmm(&a, &x),
            Err(Error::DimensionMismatch { axis: "batch", .. })
        ));
        let x = Tensor3::<f64>::zeros([2, 5, 1]);
        assert!(matches!(
            bmm(&a, &x),
            Err(Error::DimensionMismatch { axis: "inner", .. })
        ));
    }

    #[test]
    fn bmm_strided_matches_materialized() {
        let base = Matrix::from_fn(24, 3, |r, c| ((r * 7 + c * 13) % 11) as f64 - 5.3);
        let x = reshape3(&base, 4, 6, 3).unwrap().transpose01(); // (6, 4, 3)
        let a = Tensor3::from_vec([6, 2, 4], (0..48).map(|v| v as f64 * 0.37).collect()).unwrap();
        let strided = bmm(&a, &x).unwrap();
        let dense = bmm(&a, &x.materialize()).unwrap();
        assert_eq!(strided.to_vec(), dense.to_vec());

        // dot-product path: both reduction axes unit-stride
        let xt = x.materialize().transpose12().materialize().transpose12();
        assert_eq!(bmm(&a, &xt).unwrap().to_vec(), dense.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &x).unwrap().to_vec(), vec![3.0, 7.0]);
        let id = Matrix::identity(2);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        let z = Matrix::<f64>::zeros(3, 2);
        assert!(matmul(&z, &a).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &z).is_err());
    }

    #[test]
    fn flop_counts() {
        assert_eq!(flop_count_dense(16, 16, 1), 512);
        assert_eq!(flop_count_dyad(4, 4, 4, 1), 256);
        assert_eq!(flop_count_dyad(1, 5, 3, 2), 2 * flop_count_dense(5, 3, 2));
        assert_eq!(
            flop_count_dyad(8, 8, 8, 1) as f64 / flop_count_dense(64, 64, 1) as f64,
            0.25
        );
    }

    #[test]
    fn counter_tracks_products() {
        reset_multiply_adds();
        let a = Matrix::<f64>::zeros(3, 4);
        let x = Matrix::<f64>::zeros(4, 5);
        matmul(&a, &x).unwrap();
        assert_eq!(multiply_adds(), 60);
    }
}
