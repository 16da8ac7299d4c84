//! Dyad layers and the dense reference layer.
//!
//! A Dyad layer computes `Y = W1 X + W2 X + b` where `W1` is block diagonal
//! (`n_dyad` blocks of `n_out x n_in`) and `W2` is block diagonal only after
//! its columns (IT), rows (OT) or both (DT) are permuted. Both components are
//! stored packed as `(n_dyad, n_out, n_in)` tensors and applied with one
//! batched product each; the permutations are realized by reshape/transpose
//! views of the activations, never by moving weights.
//!
//! Activations are features-major: `x` is `f_in x n_batch`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{bmm, matmul, reshape3, Matrix, Scalar, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Input transpose: the second component permutes input columns.
    It,
    /// Output transpose: the second component permutes output rows.
    Ot,
    /// Double transpose: both.
    Dt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::It, Variant::Ot, Variant::Dt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::It => "it",
            Variant::Ot => "ot",
            Variant::Dt => "dt",
        }
    }

    fn permutes_input(self) -> bool {
        matches!(self, Variant::It | Variant::Dt)
    }

    fn permutes_output(self) -> bool {
        matches!(self, Variant::Ot | Variant::Dt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "it" => Ok(Variant::It),
            "ot" => Ok(Variant::Ot),
            "dt" => Ok(Variant::Dt),
            other => Err(format!("unknown variant `{other}` (expected it, ot or dt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadConfig {
    pub n_dyad: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub variant: Variant,
    pub has_bias: bool,
    /// Route IT forwards through the concatenated single-product path.
    pub fused_cat: bool,
}

impl DyadConfig {
    pub fn new(n_dyad: usize, n_in: usize, n_out: usize, variant: Variant) -> Result<Self> {
        if n_dyad == 0 || n_in == 0 || n_out == 0 {
            return Err(Error::EmptyShape);
        }
        Ok(Self {
            n_dyad,
            n_in,
            n_out,
            variant,
            has_bias: true,
            fused_cat: false,
        })
    }

    /// Config for a full `f_out x f_in` layer, rejecting non-divisible dims.
    pub fn for_dims(f_out: usize, f_in: usize, n_dyad: usize, variant: Variant) -> Result<Self> {
        validate_dims(f_out, f_in, n_dyad)?;
        Self::new(n_dyad, f_in / n_dyad, f_out / n_dyad, variant)
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_cat(mut self, fused_cat: bool) -> Self {
        self.fused_cat = fused_cat;
        self
    }

    pub fn f_in(&self) -> usize {
        self.n_dyad * self.n_in
    }

    pub fn f_out(&self) -> usize {
        self.n_dyad * self.n_out
    }

    fn block_shape(&self) -> [usize; 3] {
        [self.n_dyad, self.n_out, self.n_in]
    }

    /// Weights of both components, bias excluded.
    pub fn weight_count(&self) -> usize {
        2 * self.n_dyad * self.n_out * self.n_in
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.f_out() } else { 0 }
    }

    /// Uniform init bound `1 / sqrt(f_in)`.
    pub fn init_bound(&self) -> f64 {
        1.0 / ((self.n_in * self.n_dyad) as f64).sqrt()
    }
}

pub fn dense_weight_count(f_out: usize, f_in: usize) -> usize {
    f_out * f_in
}

pub fn dense_param_count(f_out: usize, f_in: usize, has_bias: bool) -> usize {
    dense_weight_count(f_out, f_in) + if has_bias { f_out } else { 0 }
}

/// Checks that `n_dyad` divides both dims. The error carries the smallest
/// zero-padded dims that would divide; nothing is padded implicitly.
pub fn validate_dims(f_out: usize, f_in: usize, n_dyad: usize) -> Result<()> {
    if f_out == 0 || f_in == 0 || n_dyad == 0 {
        return Err(Error::EmptyShape);
    }
    if f_out.is_multiple_of(n_dyad) && f_in.is_multiple_of(n_dyad) {
        return Ok(());
    }
    Err(Error::Divisibility {
        f_out,
        f_in,
        n_dyad,
        padded_out: f_out.next_multiple_of(n_dyad),
        padded_in: f_in.next_multiple_of(n_dyad),
    })
}

/// Samples uniformly from the open interval `(-bound, bound)`.
fn uniform_open<T: Scalar>(rng: &mut ChaCha8Rng, bound: f64, n: usize) -> Vec<T> {
    let lo = T::from_f64(-bound);
    let dist = Uniform::new(lo, T::from_f64(bound));
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v != lo {
                break v;
            }
        })
        .collect()
}

fn check_rows<T: Scalar>(x: &Matrix<T>, expected: usize) -> Result<()> {
    if x.rows() != expected {
        return Err(Error::DimensionMismatch {
            axis: "input rows",
            left: expected,
            right: x.rows(),
        });
    }
    Ok(())
}

/// `(y1 + y2) + bias`, element by element.
fn combine<T: Scalar>(
    rows: usize,
    cols: usize,
    y1: &[T],
    y2: &[T],
    bias: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    let mut out: Vec<T> = y1.iter().zip(y2).map(|(&a, &b)| a + b).collect();
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(cols).zip(b.as_slice()) {
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Matrix::new(rows, cols, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DyadLayer<T: Scalar> {
    config: DyadConfig,
    /// Both components in one buffer; `w1` is the first half, `w2` the second.
    weights: Tensor3<T>,
    w1: Tensor3<T>,
    w2: Tensor3<T>,
    bias: Option<Matrix<T>>,
}

impl<T: Scalar> DyadLayer<T> {
    /// Every weight and bias entry drawn independently from
    /// `U(-k, k)`, `k = 1/sqrt(n_in * n_dyad)`, with a ChaCha8 stream seeded
    /// from `seed`. Draw order: `w1`, `w2`, bias.
    pub fn init_uniform(config: DyadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.init_bound();
        let weights = uniform_open(&mut rng, k, config.weight_count());
        let bias = config
            .has_bias
            .then(|| Matrix::new(config.f_out(), 1, uniform_open(&mut rng, k, config.f_out())))
            .transpose()
            .expect("bias length matches f_out");
        Self::from_buffer(config, weights, bias)
    }

    pub fn from_parts(
        config: DyadConfig,
        w1: Tensor3<T>,
        w2: Tensor3<T>,
        bias: Option<Matrix<T>>,
    ) -> Result<Self> {
        let shape = config.block_shape();
        for w in [&w1, &w2] {
            if w.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.iter().product(),
                    actual: w.len(),
                });
            }
        }
        match (&bias, config.has_bias) {
            (Some(b), true) if b.shape() == (config.f_out(), 1) => {}
            (None, false) => {}
            (b, _) => {
                return Err(Error::ShapeMismatch {
                    expected: if config.has_bias { config.f_out() } else { 0 },
                    actual: b.as_ref().map_or(0, |b| b.rows() * b.cols()),
                })
            }
        }
        let mut weights = w1.to_vec();
        weights.extend(w2.to_vec());
        Ok(Self::from_buffer(config, weights, bias))
    }

    fn from_buffer(config: DyadConfig, weights: Vec<T>, bias: Option<Matrix<T>>) -> Self {
        let shape = config.block_shape();
        let half: usize = shape.iter().product();
        let buf: Arc<[T]> = weights.into();
        let stacked = [2 * config.n_dyad, config.n_out, config.n_in];
        Self {
            config,
            weights: Tensor3::view_of(Arc::clone(&buf), 0, stacked),
            w1: Tensor3::view_of(Arc::clone(&buf), 0, shape),
            w2: Tensor3::view_of(buf, half, shape),
            bias,
        }
    }

    pub fn config(&self) -> &DyadConfig {
        &self.config
    }

    /// Packed block-diagonal weights, `(n_dyad, n_out, n_in)`.
    pub fn w1(&self) -> &Tensor3<T> {
        &self.w1
    }

    /// Packed block-transposed weights, `(n_dyad, n_out, n_in)`.
    pub fn w2(&self) -> &Tensor3<T> {
        &self.w2
    }

    pub fn bias(&self) -> Option<&Matrix<T>> {
        self.bias.as_ref()
    }

    /// Forward pass for the configured variant (IT honours `fused_cat`).
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self.config.variant {
            Variant::It if self.config.fused_cat => self.forward_cat(x),
            Variant::It => self.forward_it(x),
            Variant::Ot => self.forward_ot(x),
            Variant::Dt => self.forward_dt(x),
        }
    }

    pub fn forward_it(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_variant(Variant::It)?;
        self.forward_components(x)
    }

    pub fn forward_ot(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_variant(Variant::Ot)?;
        self.forward_components(x)
    }

    pub fn forward_dt(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_variant(Variant::Dt)?;
        self.forward_components(x)
    }

    /// IT forward with both components fused into one `2 * n_dyad` batched
    /// product. The strided second-component activations are copied next to
    /// the first component's.
    pub fn forward_cat(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_variant(Variant::It)?;
        let c = &self.config;
        check_rows(x, c.f_in())?;
        let batch = x.cols();

        let mut acts = Vec::with_capacity(2 * x.as_slice().len());
        acts.extend_from_slice(x.as_slice());
        acts.extend(self.permuted_input(x)?.to_vec());
        let acts = Tensor3::from_vec([2 * c.n_dyad, c.n_in, batch], acts)?;

        let out = bmm(&self.weights, &acts)?.to_vec();
        let (y1, y2) = out.split_at(out.len() / 2);
        combine(c.f_out(), batch, y1, y2, self.bias.as_ref())
    }

    fn expect_variant(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::VariantMismatch {
                expected: v.name(),
                actual: self.config.variant.name(),
            });
        }
        Ok(())
    }

    /// `X1'`: contiguous `(n_dyad, n_in, batch)` view of `x`.
    fn block_input(&self, x: &Matrix<T>) -> Result<Tensor3<T>> {
        let c = &self.config;
        reshape3(x, c.n_dyad, c.n_in, x.cols())
    }

    /// `X2' = P^T X` as a strided view: `(n_in, n_dyad, batch)` transposed.
    fn permuted_input(&self, x: &Matrix<T>) -> Result<Tensor3<T>> {
        let c = &self.config;
        Ok(reshape3(x, c.n_in, c.n_dyad, x.cols())?.transpose01())
    }

    fn second_input(&self, x: &Matrix<T>) -> Result<Tensor3<T>> {
        if self.config.variant.permutes_input() {
            self.permuted_input(x)
        } else {
            self.block_input(x)
        }
    }

    /// Second component output in layer row order.
    fn second_output(&self, z: Tensor3<T>) -> Vec<T> {
        if self.config.variant.permutes_output() {
            // (n_dyad, n_out, B) -> (n_out, n_dyad, B), copied to contiguous.
            z.transpose01().to_vec()
        } else {
            z.to_vec()
        }
    }

    fn forward_components(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let c = &self.config;
        check_rows(x, c.f_in())?;
        let y1 = bmm(&self.w1, &self.block_input(x)?)?;
        let y2 = bmm(&self.w2, &self.second_input(x)?)?;
        combine(
            c.f_out(),
            x.cols(),
            &y1.to_vec(),
            &self.second_output(y2),
            self.bias.as_ref(),
        )
    }

    /// Gradients of a scalar loss given `d_y = dL/dY` at input `x`.
    ///
    /// Reshapes and transposes are linear maps whose adjoints are the
    /// inverse views, so upstream gradients are routed back through the same
    /// stride patterns the forward pass used.
    pub fn backward(&self, x: &Matrix<T>, d_y: &Matrix<T>) -> Result<DyadGradients<T>> {
        let c = &self.config;
        check_rows(x, c.f_in())?;
        let batch = x.cols();
        if d_y.shape() != (c.f_out(), batch) {
            return Err(Error::DimensionMismatch {
                axis: "output gradient",
                left: c.f_out() * batch,
                right: d_y.rows() * d_y.cols(),
            });
        }

        let x1 = self.block_input(x)?;
        let dy_blocks = reshape3(d_y, c.n_dyad, c.n_out, batch)?;
        let d_w1 = bmm(&dy_blocks, &x1.transpose12())?;
        let dx1 = bmm(&self.w1.transpose12(), &dy_blocks)?;

        let x2 = self.second_input(x)?;
        let dz = if c.variant.permutes_output() {
            reshape3(d_y, c.n_out, c.n_dyad, batch)?.transpose01()
        } else {
            dy_blocks
        };
        let d_w2 = bmm(&dz, &x2.transpose12())?;
        let dx2 = bmm(&self.w2.transpose12(), &dz)?;
        let dx2 = if c.variant.permutes_input() {
            dx2.transpose01().to_vec()
        } else {
            dx2.to_vec()
        };

        let d_x = combine(c.f_in(), batch, &dx1.to_vec(), &dx2, None)?;
        Ok(DyadGradients {
            d_w1,
            d_w2,
            d_bias: c.has_bias.then(|| d_y.row_sums()),
            d_x,
        })
    }

    /// Plain SGD step; returns the updated layer.
    pub fn sgd_step(&self, grads: &DyadGradients<T>, lr: T) -> Result<Self> {
        let step = |p: &Tensor3<T>, g: &Tensor3<T>| -> Vec<T> {
            p.to_vec()
                .into_iter()
                .zip(g.to_vec())
                .map(|(p, g)| p - lr * g)
                .collect()
        };
        let mut weights = step(&self.w1, &grads.d_w1);
        weights.extend(step(&self.w2, &grads.d_w2));
        let bias = match (&self.bias, &grads.d_bias) {
            (Some(b), Some(db)) => Some(b.zip_with(db, |p, g| p - lr * g)?),
            (None, None) => None,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: 1,
                    actual: 0,
                })
            }
        };
        Ok(Self::from_buffer(self.config, weights, bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DyadGradients<T: Scalar> {
    pub d_w1: Tensor3<T>,
    pub d_w2: Tensor3<T>,
    pub d_bias: Option<Matrix<T>>,
    pub d_x: Matrix<T>,
}

/// Dense reference layer `Y = W X + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T: Scalar> {
    w: Matrix<T>,
    bias: Option<Matrix<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGradients<T: Scalar> {
    pub d_w: Matrix<T>,
    pub d_bias: Option<Matrix<T>>,
    pub d_x: Matrix<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(w: Matrix<T>, bias: Option<Matrix<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (w.rows(), 1) {
                return Err(Error::DimensionMismatch {
                    axis: "bias",
                    left: w.rows(),
                    right: b.rows() * b.cols(),
                });
            }
        }
        Ok(Self { w, bias })
    }

    /// `U(-k, k)` init with `k = 1/sqrt(f_in)`, matching the Dyad bound at
    /// equal `f_in`.
    pub fn init_uniform(f_out: usize, f_in: usize, has_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1.0 / (f_in as f64).sqrt();
        let w = Matrix::new(f_out, f_in, uniform_open(&mut rng, k, f_out * f_in))
            .expect("dims are positive");
        let bias = has_bias
            .then(|| Matrix::new(f_out, 1, uniform_open(&mut rng, k, f_out)).expect("f_out > 0"));
        Self { w, bias }
    }

    pub fn w(&self) -> &Matrix<T> {
        &self.w
    }

    pub fn bias(&self) -> Option<&Matrix<T>> {
        self.bias.as_ref()
    }

    pub fn f_in(&self) -> usize {
        self.w.cols()
    }

    pub fn f_out(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = matmul(&self.w, x)?;
        match &self.bias {
            Some(b) => y.add_column(b),
            None => Ok(y),
        }
    }

    pub fn backward(&self, x: &Matrix<T>, d_y: &Matrix<T>) -> Result<DenseGradients<T>> {
        check_rows(x, self.f_in())?;
        if d_y.shape() != (self.f_out(), x.cols()) {
            return Err(Error::DimensionMismatch {
                axis: "output gradient",
                left: self.f_out() * x.cols(),
                right: d_y.rows() * d_y.cols(),
            });
        }
        let d_w =
            bmm(&d_y.view(), &x.view().transpose12())?.to_matrix(self.f_out(), self.f_in())?;
        let d_x =
            bmm(&self.w.view().transpose12(), &d_y.view())?.to_matrix(self.f_in(), x.cols())?;
        Ok(DenseGradients {
            d_w,
            d_bias: self.bias.is_some().then(|| d_y.row_sums()),
            d_x,
        })
    }

    pub fn sgd_step(&self, grads: &DenseGradients<T>, lr: T) -> Result<Self> {
        let w = self.w.zip_with(&grads.d_w, |p, g| p - lr * g)?;
        let bias = match (&self.bias, &grads.d_bias) {
            (Some(b), Some(db)) => Some(b.zip_with(db, |p, g| p - lr * g)?),
            (None, None) => None,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: 1,
                    actual: 0,
                })
            }
        };
        Ok(Self { w, bias })
    }
}

/// Either kind of linear layer, for code that swaps one for the other.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Linear<T: Scalar> {
    Dense(DenseLayer<T>),
    Dyad(DyadLayer<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearGradients<T: Scalar> {
    Dense(DenseGradients<T>),
    Dyad(DyadGradients<T>),
}

impl<T: Scalar> LinearGradients<T> {
    pub fn d_x(&self) -> &Matrix<T> {
        match self {
            LinearGradients::Dense(g) => &g.d_x,
            LinearGradients::Dyad(g) => &g.d_x,
        }
    }
}

impl<T: Scalar> Linear<T> {
    pub fn f_in(&self) -> usize {
        match self {
            Linear::Dense(l) => l.f_in(),
            Linear::Dyad(l) => l.config().f_in(),
        }
    }

    pub fn f_out(&self) -> usize {
        match self {
            Linear::Dense(l) => l.f_out(),
            Linear::Dyad(l) => l.config().f_out(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(l) => dense_param_count(l.f_out(), l.f_in(), l.bias().is_some()),
            Linear::Dyad(l) => l.config().param_count(),
        }
    }

    /// Short tag used in benchmark and checkpoint output.
    pub fn tag(&self) -> String {
        match self {
            Linear::Dense(_) => "dense".into(),
            Linear::Dyad(l) if l.config().fused_cat && l.config().variant == Variant::It => {
                "dyad-it-cat".into()
            }
            Linear::Dyad(l) => format!("dyad-{}", l.config().variant),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Linear::Dense(l) => l.forward(x),
            Linear::Dyad(l) => l.forward(x),
        }
    }

    pub fn backward(&self, x: &Matrix<T>, d_y: &Matrix<T>) -> Result<LinearGradients<T>> {
        Ok(match self {
            Linear::Dense(l) => LinearGradients::Dense(l.backward(x, d_y)?),
            Linear::Dyad(l) => LinearGradients::Dyad(l.backward(x, d_y)?),
        })
    }

    pub fn sgd_step(&self, grads: &LinearGradients<T>, lr: T) -> Result<Self> {
        match (self, grads) {
            (Linear::Dense(l), LinearGradients::Dense(g)) => Ok(Linear::Dense(l.sgd_step(g, lr)?)),
            (Linear::Dyad(l), LinearGradients::Dyad(g)) => Ok(Linear::Dyad(l.sgd_step(g, lr)?)),
            _ => Err(Error::VariantMismatch {
                expected: "matching gradient kind",
                actual: "mismatched gradient kind",
            }),
        }
    }
}
