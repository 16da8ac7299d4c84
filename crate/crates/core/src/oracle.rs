//! Ground-truth constructions used to check the packed fast paths.
//!
//! Everything here works on fully materialized dense matrices: explicit
//! permutation matrices, block-diagonal expansion of packed weights, naive
//! products, dense-adjoint gradients, finite differences, and brute-force path
//! counting through two stacked layers.
//!
//! Permutation conventions. [`permutation_matrix`]`(p, q)` has a one at
//! `(i, p * (i % q) + i / q)`. Viewing a column of length `p * q` as a
//! `q x p` grid and transposing it to `p x q` is the same as multiplying by
//! `permutation_matrix(p, q)`. Its inverse (and transpose) is
//! `permutation_matrix(q, p)`.
//!
//! For a layer with `n_dyad` blocks:
//! * the input transform `X' = P1^T X` uses `P1 = permutation_matrix(n_in, n_dyad)`
//!   ([`input_permutation`]);
//! * the output transform `Y2 = P2^T Z` uses `P2 = permutation_matrix(n_dyad, n_out)`
//!   ([`output_permutation`]).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layer::{DyadConfig, DyadGradients, DyadLayer, Variant};
use crate::tensor::{matmul, Matrix, Scalar, Tensor3};

/// `(n_dyad * n)` square 0/1 matrix with `P(i, j) = 1` iff
/// `j = n_dyad * (i % n) + i / n`.
pub fn permutation_matrix<T: Scalar>(n_dyad: usize, n: usize) -> Matrix<T> {
    let size = n_dyad * n;
    Matrix::from_fn(size, size, |i, j| {
        if j == n_dyad * (i % n) + i / n {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `P1` such that the strided input view equals `P1^T X`.
pub fn input_permutation<T: Scalar>(n_dyad: usize, n_in: usize) -> Matrix<T> {
    permutation_matrix(n_in, n_dyad)
}

/// `P2` such that the transposed block output equals `P2^T Z`.
pub fn output_permutation<T: Scalar>(n_dyad: usize, n_out: usize) -> Matrix<T> {
    permutation_matrix(n_dyad, n_out)
}

/// Triple loop, `k` innermost and ascending.
pub fn naive_matmul<T: Scalar>(a: &Matrix<T>, x: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), x.rows(), "inner dimensions differ");
    Matrix::from_fn(a.rows(), x.cols(), |i, j| {
        let mut acc = T::zero();
        for k in 0..a.cols() {
            acc = acc + a.get(i, k) * x.get(k, j);
        }
        acc
    })
}

/// Expand packed `(n_dyad, n_out, n_in)` weights to the full block-diagonal
/// matrix, inverting `W'[i, j, k] = W[i * n_out + j, i * n_in + k]`.
pub fn materialize_blockdiag<T: Scalar>(w: &Tensor3<T>) -> Matrix<T> {
    let [n_dyad, n_out, n_in] = w.shape();
    Matrix::from_fn(n_dyad * n_out, n_dyad * n_in, |r, c| {
        let (bi, j) = (r / n_out, r % n_out);
        let (bk, k) = (c / n_in, c % n_in);
        if bi == bk {
            w.get(bi, j, k)
        } else {
            T::zero()
        }
    })
}

/// Dense matrices of the two components, `(W1, W2)`.
pub fn materialize_components<T: Scalar>(layer: &DyadLayer<T>) -> (Matrix<T>, Matrix<T>) {
    let c = layer.config();
    let w1 = materialize_blockdiag(layer.w1());
    let mut w2 = materialize_blockdiag(layer.w2());
    if matches!(c.variant, Variant::It | Variant::Dt) {
        let p1 = input_permutation::<T>(c.n_dyad, c.n_in);
        w2 = matmul(&w2, &p1.transpose()).expect("square permutation");
    }
    if matches!(c.variant, Variant::Ot | Variant::Dt) {
        let p2 = output_permutation::<T>(c.n_dyad, c.n_out);
        w2 = matmul(&p2.transpose(), &w2).expect("square permutation");
    }
    (w1, w2)
}

/// The layer's effective dense weight matrix `W1 + W2`. Positions covered by
/// both components add.
pub fn materialize_variant<T: Scalar>(layer: &DyadLayer<T>) -> Matrix<T> {
    let (w1, w2) = materialize_components(layer);
    w1.add(&w2).expect("components share a shape")
}

/// `materialize_variant(layer) * x + b`.
pub fn dense_forward<T: Scalar>(layer: &DyadLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let y = matmul(&materialize_variant(layer), x)?;
    add_bias(y, layer.bias())
}

/// `W1 x + W2 x + b` with each component materialized separately. Sums in the
/// same order as the packed path, so agreement is bit-exact.
pub fn component_forward<T: Scalar>(layer: &DyadLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let (w1, w2) = materialize_components(layer);
    let y = naive_matmul(&w1, x).add(&naive_matmul(&w2, x))?;
    add_bias(y, layer.bias())
}

fn add_bias<T: Scalar>(y: Matrix<T>, bias: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    match bias {
        Some(b) => y.add_column(b),
        None => Ok(y),
    }
}

fn extract_blocks<T: Scalar>(m: &Matrix<T>, config: &DyadConfig) -> Tensor3<T> {
    let (nd, no, ni) = (config.n_dyad, config.n_out, config.n_in);
    let mut data = Vec::with_capacity(nd * no * ni);
    for b in 0..nd {
        for j in 0..no {
            for k in 0..ni {
                data.push(m.get(b * no + j, b * ni + k));
            }
        }
    }
    Tensor3::from_vec([nd, no, ni], data).expect("block shape")
}

/// Gradients from the dense formulation: `dW = dY X^T` on the materialized
/// matrix, projected back onto each component's packed blocks through the
/// component's permutations, and `dX = W^T dY`.
pub fn dense_gradients<T: Scalar>(
    layer: &DyadLayer<T>,
    x: &Matrix<T>,
    d_y: &Matrix<T>,
) -> Result<DyadGradients<T>> {
    let c = layer.config();
    let d_w = matmul(d_y, &x.transpose())?;
    let mut d_bd2 = d_w.clone();
    if matches!(c.variant, Variant::Ot | Variant::Dt) {
        d_bd2 = matmul(&output_permutation::<T>(c.n_dyad, c.n_out), &d_bd2)?;
    }
    if matches!(c.variant, Variant::It | Variant::Dt) {
        d_bd2 = matmul(&d_bd2, &input_permutation::<T>(c.n_dyad, c.n_in))?;
    }
    let d_x = matmul(&materialize_variant(layer).transpose(), d_y)?;
    Ok(DyadGradients {
        d_w1: extract_blocks(&d_w, c),
        d_w2: extract_blocks(&d_bd2, c),
        d_bias: c.has_bias.then(|| d_y.row_sums()),
        d_x,
    })
}

/// `0.5 * ||layer(x)||^2`, the loss whose output gradient is `Y` itself.
pub fn half_squared_norm<T: Scalar>(y: &Matrix<T>) -> f64 {
    0.5 * y
        .as_slice()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
}

/// Central finite differences of `0.5 * ||layer(x)||^2` with step `h`, for
/// every weight, bias entry and input entry.
pub fn finite_difference_gradients<T: Scalar>(
    layer: &DyadLayer<T>,
    x: &Matrix<T>,
    h: f64,
) -> Result<DyadGradients<T>> {
    let c = *layer.config();
    let w1 = layer.w1().to_vec();
    let w2 = layer.w2().to_vec();
    let bias = layer.bias().map(Matrix::to_vec);
    let shape = [c.n_dyad, c.n_out, c.n_in];

    let loss_of = |w1: &[T], w2: &[T], bias: Option<&[T]>, x: &Matrix<T>| -> Result<f64> {
        let l = DyadLayer::from_parts(
            c,
            Tensor3::from_vec(shape, w1.to_vec())?,
            Tensor3::from_vec(shape, w2.to_vec())?,
            bias.map(|b| Matrix::new(b.len(), 1, b.to_vec()))
                .transpose()?,
        )?;
        Ok(half_squared_norm(&l.forward(x)?))
    };
    let hh = T::from_f64(h);
    let central = |f: &mut dyn FnMut(T) -> Result<f64>| -> Result<T> {
        let up = f(hh)?;
        let down = f(-hh)?;
        Ok(T::from_f64((up - down) / (2.0 * h)))
    };

    let mut d_w1 = Vec::with_capacity(w1.len());
    for i in 0..w1.len() {
        d_w1.push(central(&mut |d| {
            let mut w = w1.clone();
            w[i] = w[i] + d;
            loss_of(&w, &w2, bias.as_deref(), x)
        })?);
    }
    let mut d_w2 = Vec::with_capacity(w2.len());
    for i in 0..w2.len() {
        d_w2.push(central(&mut |d| {
            let mut w = w2.clone();
            w[i] = w[i] + d;
            loss_of(&w1, &w, bias.as_deref(), x)
        })?);
    }
    let d_bias = match &bias {
        Some(b) => {
            let mut g = Vec::with_capacity(b.len());
            for i in 0..b.len() {
                g.push(central(&mut |d| {
                    let mut bb = b.clone();
                    bb[i] = bb[i] + d;
                    loss_of(&w1, &w2, Some(&bb), x)
                })?);
            }
            Some(Matrix::new(b.len(), 1, g)?)
        }
        None => None,
    };
    let xv = x.to_vec();
    let mut d_x = Vec::with_capacity(xv.len());
    for i in 0..xv.len() {
        d_x.push(central(&mut |d| {
            let mut v = xv.clone();
            v[i] = v[i] + d;
            loss_of(
                &w1,
                &w2,
                bias.as_deref(),
                &Matrix::new(x.rows(), x.cols(), v)?,
            )
        })?);
    }

    Ok(DyadGradients {
        d_w1: Tensor3::from_vec(shape, d_w1)?,
        d_w2: Tensor3::from_vec(shape, d_w2)?,
        d_bias,
        d_x: Matrix::new(x.rows(), x.cols(), d_x)?,
    })
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`relative_error`] between two equal-length slices.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}

/// `max |a - b| / max |b|` over whole matrices.
pub fn normwise_relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max);
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.max_abs().as_f64().max(f64::MIN_POSITIVE)
}

/// Largest [`max_relative_error`] over every gradient field.
pub fn gradient_error<T: Scalar>(a: &DyadGradients<T>, b: &DyadGradients<T>, floor: f64) -> f64 {
    let mut err = max_relative_error(&a.d_w1.to_vec(), &b.d_w1.to_vec(), floor)
        .max(max_relative_error(
            &a.d_w2.to_vec(),
            &b.d_w2.to_vec(),
            floor,
        ))
        .max(max_relative_error(
            a.d_x.as_slice(),
            b.d_x.as_slice(),
            floor,
        ));
    if let (Some(x), Some(y)) = (&a.d_bias, &b.d_bias) {
        err = err.max(max_relative_error(x.as_slice(), y.as_slice(), floor));
    }
    err
}

/// 0/1 connectivity pattern of a square Dyad layer (`n_in = n_out = n`).
/// Positions covered by both components count once.
pub fn connectivity_pattern(n_dyad: usize, n: usize, variant: Variant) -> Matrix<f64> {
    let cfg = DyadConfig::new(n_dyad, n, n, variant)
        .expect("positive dims")
        .with_bias(false);
    let ones = Tensor3::from_vec([n_dyad, n, n], vec![1.0; n_dyad * n * n]).expect("shape");
    let layer = DyadLayer::from_parts(cfg, ones.clone(), ones, None).expect("consistent parts");
    materialize_variant(&layer).map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCount {
    /// Input feature index.
    pub i: usize,
    /// Output feature index.
    pub j: usize,
    pub same_block: bool,
    pub path_count: u64,
    pub dense_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityTable {
    pub n_dyad: usize,
    pub n: usize,
    pub variant: Variant,
    /// Sorted by `(i, j)`.
    pub rows: Vec<PathCount>,
}

impl ConnectivityTable {
    fn mean_where(&self, same: bool) -> f64 {
        let (sum, count) = self
            .rows
            .iter()
            .filter(|r| r.same_block == same)
            .fold((0u64, 0u64), |(s, c), r| (s + r.path_count, c + 1));
        if count == 0 {
            f64::NAN
        } else {
            sum as f64 / count as f64
        }
    }

    pub fn same_block_mean(&self) -> f64 {
        self.mean_where(true)
    }

    /// NaN when there is only one block.
    pub fn cross_block_mean(&self) -> f64 {
        self.mean_where(false)
    }

    pub fn dense_baseline(&self) -> u64 {
        (self.n_dyad * self.n) as u64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<PathCount>> {
        let mut r = csv::Reader::from_reader(input);
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Counts, for two stacked square Dyad layers with the same pattern, the
/// number of hidden units through which each input reaches each output.
pub fn count_paths(n_dyad: usize, n: usize, variant: Variant) -> ConnectivityTable {
    let m = connectivity_pattern(n_dyad, n, variant);
    let size = n_dyad * n;
    let mut rows = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let paths = (0..size)
                .filter(|&k| m.get(j, k) == 1.0 && m.get(k, i) == 1.0)
                .count() as u64;
            rows.push(PathCount {
                i,
                j,
                same_block: i / n == j / n,
                path_count: paths,
                dense_count: size as u64,
            });
        }
    }
    ConnectivityTable {
        n_dyad,
        n,
        variant,
        rows,
    }
}
