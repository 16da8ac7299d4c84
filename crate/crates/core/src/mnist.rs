//! MNIST ingestion, a two-layer MLP with a swappable hidden layer, plain SGD
//! training, evaluation, and checkpoint persistence.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DYAD" | version: u32 | scalar bytes: u8 (4 or 8)
//! layer1 header | layer2 header
//! epoch: u32 | seed: u64 | final_loss: f64
//! layer1 buffers | layer2 buffers
//! ```
//!
//! A layer header is a kind byte (0 = dense, 1 = dyad) followed by
//! `f_out: u32, f_in: u32, has_bias: u8` for dense, or
//! `n_dyad: u32, n_in: u32, n_out: u32, variant: u8 (0 it, 1 ot, 2 dt),
//! has_bias: u8, fused_cat: u8` for dyad. Buffers are raw scalars: dense
//! writes `w` then bias; dyad writes `w1`, `w2`, then bias.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{DenseLayer, DyadConfig, DyadLayer, Linear, Variant};
use crate::tensor::{Matrix, Scalar, Tensor3};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DYAD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct MnistDataset<T: Scalar> {
    /// One example per column, pixels scaled to `[0, 1]`.
    pub images: Matrix<T>,
    pub labels: Vec<u8>,
    pub split: Split,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * T::BYTES)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_error(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn check_magic(c: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let found = c.u32_be()?;
    if found != expected {
        return Err(Error::BadMagic {
            path: c.path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX image file: returns `(rows, cols, raw pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor::new(bytes, path);
    check_magic(&mut c, IMAGE_MAGIC)?;
    let count = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let pixels = c.take(count * rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut c = Cursor::new(bytes, path);
    check_magic(&mut c, LABEL_MAGIC)?;
    let count = c.u32_be()? as usize;
    let labels = c.take(count)?.to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(format_error(path, format!("label {bad} out of range")));
    }
    Ok(labels)
}

/// Loads an IDX image/label pair.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<MnistDataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = parse_idx_images(&fs::read(ip)?, ip)?;
    let labels = parse_idx_labels(&fs::read(lp)?, lp)?;
    MnistDataset::from_raw(count, rows * cols, &pixels, labels, split)
}

/// Standard MNIST file names inside `dir`.
pub fn load_split<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<MnistDataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

impl<T: Scalar> MnistDataset<T> {
    /// `pixels` holds `count` images of `features` bytes each, example-major.
    pub fn from_raw(
        count: usize,
        features: usize,
        pixels: &[u8],
        labels: Vec<u8>,
        split: Split,
    ) -> Result<Self> {
        if count != labels.len() {
            return Err(Error::CountMismatch {
                images: count,
                labels: labels.len(),
            });
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let scale = T::from_f64(255.0);
        let images = Matrix::from_fn(features, count, |f, n| {
            T::from_f64(f64::from(pixels[n * features + f])) / scale
        });
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.rows()
    }

    /// Copies the listed examples, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_columns(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        })
    }

    /// The first `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Hidden-layer kind for the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenKind {
    Dense,
    /// Dyad-IT with the given block count.
    DyadIt {
        n_dyad: usize,
    },
}

/// `input -> hidden (ReLU) -> 10`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Scalar> {
    pub layer1: Linear<T>,
    pub layer2: Linear<T>,
}

struct Activations<T: Scalar> {
    pre: Matrix<T>,
    hidden: Matrix<T>,
    logits: Matrix<T>,
}

impl<T: Scalar> MlpModel<T> {
    /// The classifier head is always dense.
    pub fn new(input: usize, hidden: usize, kind: HiddenKind, seed: u64) -> Result<Self> {
        let layer1 = match kind {
            HiddenKind::Dense => Linear::Dense(DenseLayer::init_uniform(hidden, input, true, seed)),
            HiddenKind::DyadIt { n_dyad } => {
                let cfg = DyadConfig::for_dims(hidden, input, n_dyad, Variant::It)?;
                Linear::Dyad(DyadLayer::init_uniform(cfg, seed))
            }
        };
        let layer2 = Linear::Dense(DenseLayer::init_uniform(
            CLASSES,
            hidden,
            true,
            seed.wrapping_add(1),
        ));
        Self::from_layers(layer1, layer2)
    }

    pub fn from_layers(layer1: Linear<T>, layer2: Linear<T>) -> Result<Self> {
        if layer1.f_out() != layer2.f_in() {
            return Err(Error::DimensionMismatch {
                axis: "hidden",
                left: layer1.f_out(),
                right: layer2.f_in(),
            });
        }
        if layer2.f_out() != CLASSES {
            return Err(Error::DimensionMismatch {
                axis: "classes",
                left: CLASSES,
                right: layer2.f_out(),
            });
        }
        Ok(Self { layer1, layer2 })
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.f_in()
    }

    pub fn param_count(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count()
    }

    fn activations(&self, x: &Matrix<T>) -> Result<Activations<T>> {
        let pre = self.layer1.forward(x)?;
        let hidden = pre.map(|v| v.max(T::zero()));
        let logits = self.layer2.forward(&hidden)?;
        Ok(Activations {
            pre,
            hidden,
            logits,
        })
    }

    /// `10 x batch` logits.
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.activations(x)?.logits)
    }

    /// One SGD step on mean softmax cross-entropy. Returns the updated model
    /// and the batch loss before the update.
    pub fn sgd_step(&self, x: &Matrix<T>, labels: &[u8], lr: T) -> Result<(Self, f64)> {
        let acts = self.activations(x)?;
        let (loss, d_logits) = softmax_cross_entropy(&acts.logits, labels);
        let g2 = self.layer2.backward(&acts.hidden, &d_logits)?;
        let d_pre = g2
            .d_x()
            .zip_with(&acts.pre, |g, p| if p > T::zero() { g } else { T::zero() })?;
        let g1 = self.layer1.backward(x, &d_pre)?;
        Ok((
            Self {
                layer1: self.layer1.sgd_step(&g1, lr)?,
                layer2: self.layer2.sgd_step(&g2, lr)?,
            },
            loss,
        ))
    }
}

/// Mean cross-entropy over columns, and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[u8]) -> (f64, Matrix<T>) {
    let (classes, batch) = logits.shape();
    assert_eq!(labels.len(), batch, "one label per column");
    let mut grad = vec![T::zero(); classes * batch];
    let mut loss = 0.0;
    let inv_batch = T::from_f64(1.0 / batch as f64);
    for (n, &label) in labels.iter().enumerate() {
        let col = |c: usize| logits.get(c, n);
        let max = (0..classes).map(col).fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = (0..classes).map(|c| (col(c) - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
        loss += (sum.ln() - (col(label as usize) - max)).as_f64();
        for (c, &e) in exps.iter().enumerate() {
            let target = if c == label as usize {
                T::one()
            } else {
                T::zero()
            };
            grad[c * batch + n] = (e / sum - target) * inv_batch;
        }
    }
    (
        loss / batch as f64,
        Matrix::new(classes, batch, grad).expect("logit shape"),
    )
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate<T: Scalar>(model: &MlpModel<T>, data: &MnistDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = data.images.select_columns(chunk)?;
        let logits = model.logits(&x)?;
        for (n, &i) in chunk.iter().enumerate() {
            if argmax((0..CLASSES).map(|c| logits.get(c, n))) == data.labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based; epoch 0 is the untrained model.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (NaN for epoch 0).
    pub train_loss: f64,
    /// NaN when no evaluation set was given.
    pub test_accuracy: f64,
}

/// Minibatch SGD with a seeded shuffle every epoch. Aborts on a non-finite
/// loss.
pub fn train<T: Scalar>(
    mut model: MlpModel<T>,
    train_set: &MnistDataset<T>,
    eval_set: Option<&MnistDataset<T>>,
    cfg: &TrainConfig,
) -> Result<(MlpModel<T>, Vec<EpochMetrics>)> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("lr = {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidHyperparameter("batch_size = 0".into()));
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train_set.features() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            axis: "features",
            left: model.input_dim(),
            right: train_set.features(),
        });
    }

    let lr = T::from_f64(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.images.select_columns(batch)?;
            let labels: Vec<u8> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (next, loss) = model.sgd_step(&x, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            model = next;
            total += loss;
            steps += 1;
        }
        let test_accuracy = match eval_set {
            Some(d) => evaluate(&model, d)?,
            None => f64::NAN,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: total / steps as f64,
            test_accuracy,
        });
    }
    Ok((model, metrics))
}

/// `epoch,train_loss,test_accuracy` CSV, fixed-precision so that reruns are
/// byte-identical.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy\n");
    for m in metrics {
        writeln!(
            out,
            "{},{:.6},{:.6}",
            m.epoch, m.train_loss, m.test_accuracy
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub epoch: u32,
    pub seed: u64,
    pub final_loss: f64,
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::It => 0,
        Variant::Ot => 1,
        Variant::Dt => 2,
    }
}

fn write_header<T: Scalar>(out: &mut Vec<u8>, layer: &Linear<T>) {
    match layer {
        Linear::Dense(l) => {
            out.push(0);
            out.extend_from_slice(&(l.f_out() as u32).to_le_bytes());
            out.extend_from_slice(&(l.f_in() as u32).to_le_bytes());
            out.push(u8::from(l.bias().is_some()));
        }
        Linear::Dyad(l) => {
            let c = l.config();
            out.push(1);
            for v in [c.n_dyad, c.n_in, c.n_out] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            out.push(variant_code(c.variant));
            out.push(u8::from(c.has_bias));
            out.push(u8::from(c.fused_cat));
        }
    }
}

fn write_buffers<T: Scalar>(out: &mut Vec<u8>, layer: &Linear<T>) {
    let mut put = |vals: &[T]| vals.iter().for_each(|v| v.write_le(out));
    match layer {
        Linear::Dense(l) => {
            put(l.w().as_slice());
            if let Some(b) = l.bias() {
                put(b.as_slice());
            }
        }
        Linear::Dyad(l) => {
            put(&l.w1().to_vec());
            put(&l.w2().to_vec());
            if let Some(b) = l.bias() {
                put(b.as_slice());
            }
        }
    }
}

enum Header {
    Dense {
        f_out: usize,
        f_in: usize,
        bias: bool,
    },
    Dyad(DyadConfig),
}

fn read_header(c: &mut Cursor<'_>) -> Result<Header> {
    match c.u8()? {
        0 => Ok(Header::Dense {
            f_out: c.u32_le()? as usize,
            f_in: c.u32_le()? as usize,
            bias: c.u8()? != 0,
        }),
        1 => {
            let (n_dyad, n_in, n_out) = (
                c.u32_le()? as usize,
                c.u32_le()? as usize,
                c.u32_le()? as usize,
            );
            let variant = match c.u8()? {
                0 => Variant::It,
                1 => Variant::Ot,
                2 => Variant::Dt,
                v => return Err(format_error(c.path, format!("unknown variant code {v}"))),
            };
            let cfg = DyadConfig::new(n_dyad, n_in, n_out, variant)?
                .with_bias(c.u8()? != 0)
                .with_cat(c.u8()? != 0);
            Ok(Header::Dyad(cfg))
        }
        k => Err(format_error(c.path, format!("unknown layer kind {k}"))),
    }
}

fn read_layer<T: Scalar>(c: &mut Cursor<'_>, header: &Header) -> Result<Linear<T>> {
    match *header {
        Header::Dense { f_out, f_in, bias } => {
            let w = Matrix::new(f_out, f_in, c.scalars(f_out * f_in)?)?;
            let b = if bias {
                Some(Matrix::new(f_out, 1, c.scalars(f_out)?)?)
            } else {
                None
            };
            Ok(Linear::Dense(DenseLayer::new(w, b)?))
        }
        Header::Dyad(cfg) => {
            let shape = [cfg.n_dyad, cfg.n_out, cfg.n_in];
            let n = cfg.n_dyad * cfg.n_out * cfg.n_in;
            let w1 = Tensor3::from_vec(shape, c.scalars(n)?)?;
            let w2 = Tensor3::from_vec(shape, c.scalars(n)?)?;
            let b = if cfg.has_bias {
                Some(Matrix::new(cfg.f_out(), 1, c.scalars(cfg.f_out())?)?)
            } else {
                None
            };
            Ok(Linear::Dyad(DyadLayer::from_parts(cfg, w1, w2, b)?))
        }
    }
}

pub fn checkpoint_bytes<T: Scalar>(model: &MlpModel<T>, meta: &TrainMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    write_header(&mut out, &model.layer1);
    write_header(&mut out, &model.layer2);
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.final_loss.to_le_bytes());
    write_buffers(&mut out, &model.layer1);
    write_buffers(&mut out, &model.layer2);
    out
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(MlpModel<T>, TrainMeta)> {
    let mut c = Cursor::new(bytes, path);
    let magic = c.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = c.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let width = c.u8()? as usize;
    if width != T::BYTES {
        return Err(format_error(
            path,
            format!(
                "checkpoint holds {width}-byte scalars, reader expects {}",
                T::NAME
            ),
        ));
    }
    let h1 = read_header(&mut c)?;
    let h2 = read_header(&mut c)?;
    let meta = TrainMeta {
        epoch: c.u32_le()?,
        seed: c.u64_le()?,
        final_loss: c.f64_le()?,
    };
    let layer1 = read_layer(&mut c, &h1)?;
    let layer2 = read_layer(&mut c, &h2)?;
    c.finish()?;
    Ok((MlpModel::from_layers(layer1, layer2)?, meta))
}

pub fn save_checkpoint<T: Scalar>(
    model: &MlpModel<T>,
    meta: &TrainMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(MlpModel<T>, TrainMeta)> {
    let path: PathBuf = path.as_ref().to_path_buf();
    parse_checkpoint(&fs::read(&path)?, &path)
}
