#![allow(dead_code)]

use dyad::{DyadConfig, DyadLayer, Matrix, Scalar, Variant};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every forward path: the three variants plus the fused IT path.
pub const KINDS: [(Variant, bool); 4] = [
    (Variant::It, false),
    (Variant::Ot, false),
    (Variant::Dt, false),
    (Variant::It, true),
];

pub fn kind_name(kind: (Variant, bool)) -> &'static str {
    match kind {
        (Variant::It, true) => "it-cat",
        (v, _) => v.name(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let dist = Uniform::new_inclusive(T::from_f64(-1.0), T::from_f64(1.0));
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn layer<T: Scalar>(
    kind: (Variant, bool),
    n_dyad: usize,
    n_in: usize,
    n_out: usize,
    seed: u64,
) -> DyadLayer<T> {
    let cfg = DyadConfig::new(n_dyad, n_in, n_out, kind.0)
        .unwrap()
        .with_cat(kind.1);
    DyadLayer::init_uniform(cfg, seed)
}

/// The MNIST directory, or `None` when the files are absent.
pub fn mnist_dir() -> Option<std::path::PathBuf> {
    let dir = std::env::var_os("DYAD_MNIST_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| {
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
        });
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

pub fn write_idx(dir: &std::path::Path, prefix: &str, pixels: &[u8], labels: &[u8], side: u32) {
    let mut img = dyad::mnist::IMAGE_MAGIC.to_be_bytes().to_vec();
    for v in [labels.len() as u32, side, side] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = dyad::mnist::LABEL_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Ten-class toy problem on 4x4 images: class c lights pixel c.
pub fn synthetic_dir(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for prefix in ["train", "t10k"] {
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let mut pixels = vec![0u8; n * 16];
        for (i, &l) in labels.iter().enumerate() {
            pixels[i * 16 + l as usize] = 255;
            pixels[i * 16 + 15] = (i * 13 % 256) as u8;
        }
        write_idx(dir.path(), prefix, &pixels, &labels, 4);
    }
    dir
}
