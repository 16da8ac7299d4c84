mod common;

use common::{synthetic_dir, write_idx};

use approx::assert_relative_eq;
use dyad::layer::{DenseLayer, Linear};
use dyad::mnist::{
    evaluate, load_checkpoint, load_idx, load_split, metrics_csv, save_checkpoint, train,
    HiddenKind, MlpModel, MnistDataset, Split, TrainConfig, TrainMeta,
};
use dyad::{Error, Matrix};

#[test]
fn loads_idx_files_from_disk() {
    let dir = synthetic_dir(30);
    let ds = load_split::<f32>(dir.path(), Split::Train).unwrap();
    assert_eq!(ds.images.shape(), (16, 30));
    assert_eq!(ds.split, Split::Train);
    assert!(ds.images.as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(ds.images.get(ds.labels[3] as usize, 3), 1.0);
}

#[test]
fn count_mismatch_between_files() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "a", &[0; 32], &[1, 2], 4);
    write_idx(dir.path(), "b", &[0; 48], &[1, 2, 3], 4);
    let err = load_idx::<f32>(
        dir.path().join("a-images-idx3-ubyte"),
        dir.path().join("b-labels-idx1-ubyte"),
        Split::Test,
    )
    .unwrap_err();
    assert!(matches!(
        err,
        Error::CountMismatch {
            images: 2,
            labels: 3
        }
    ));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_split::<f32>(dir.path(), Split::Test),
        Err(Error::Io(_))
    ));
}

fn perfect_model() -> MlpModel<f64> {
    // hidden = input (identity), head = identity on the first ten features.
    let l1 = Linear::Dense(DenseLayer::new(Matrix::identity(10), None).unwrap());
    let l2 = Linear::Dense(DenseLayer::new(Matrix::identity(10), None).unwrap());
    MlpModel::from_layers(l1, l2).unwrap()
}

#[test]
fn perfect_logits_score_one() {
    let labels = vec![0u8, 3, 9, 4, 4];
    let mut pixels = vec![0u8; 50];
    for (i, &l) in labels.iter().enumerate() {
        pixels[i * 10 + l as usize] = 200;
    }
    let ds = MnistDataset::<f64>::from_raw(5, 10, &pixels, labels, Split::Test).unwrap();
    assert_eq!(evaluate(&perfect_model(), &ds).unwrap(), 1.0);
}

#[test]
fn accuracy_is_order_invariant() {
    let dir = synthetic_dir(40);
    let ds = load_split::<f64>(dir.path(), Split::Test).unwrap();
    let model = MlpModel::<f64>::new(16, 8, HiddenKind::DyadIt { n_dyad: 4 }, 3).unwrap();
    let mut order: Vec<usize> = (0..40).collect();
    order.reverse();
    order.swap(3, 17);
    let shuffled = ds.subset(&order).unwrap();
    assert_eq!(
        evaluate(&model, &ds).unwrap(),
        evaluate(&model, &shuffled).unwrap()
    );
}

fn toy_run(seed: u64) -> (MlpModel<f32>, String) {
    let dir = synthetic_dir(200);
    let tr = load_split::<f32>(dir.path(), Split::Train).unwrap();
    let te = load_split::<f32>(dir.path(), Split::Test).unwrap();
    let model = MlpModel::new(16, 16, HiddenKind::DyadIt { n_dyad: 4 }, seed).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        lr: 0.5,
        batch_size: 16,
        seed,
    };
    let (m, metrics) = train(model, &tr, Some(&te), &cfg).unwrap();
    (m, metrics_csv(&metrics))
}

#[test]
fn training_is_bit_reproducible_and_learns() {
    let (m1, csv1) = toy_run(11);
    let (m2, csv2) = toy_run(11);
    assert_eq!(m1, m2);
    assert_eq!(csv1, csv2);
    let (_, other) = toy_run(12);
    assert_ne!(csv1, other);
    let last = csv1.lines().last().unwrap();
    let acc: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(acc > 0.9, "{csv1}");
}

#[test]
fn checkpoint_file_round_trip() {
    let (model, _) = toy_run(4);
    let meta = TrainMeta {
        epoch: 20,
        seed: 4,
        final_loss: 0.125,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &meta, &path).unwrap();
    let (loaded, m) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(m, meta);
    let x = load_split::<f32>(synthetic_dir(10).path(), Split::Test)
        .unwrap()
        .images;
    assert_eq!(loaded.logits(&x).unwrap(), model.logits(&x).unwrap());
}

#[test]
fn dyad_hidden_layer_on_mnist_shapes() {
    let model = MlpModel::<f32>::new(784, 256, HiddenKind::DyadIt { n_dyad: 4 }, 0).unwrap();
    match &model.layer1 {
        Linear::Dyad(l) => {
            assert_eq!((l.config().n_in, l.config().n_out), (196, 64));
        }
        Linear::Dense(_) => panic!("expected a dyad layer"),
    }
    assert!(MlpModel::<f32>::new(784, 256, HiddenKind::DyadIt { n_dyad: 3 }, 0).is_err());
}

#[test]
fn real_mnist_loads_when_present() {
    let Some(dir) = common::mnist_dir() else {
        eprintln!("MNIST files not found; skipping");
        return;
    };
    let test = load_split::<f32>(&dir, Split::Test).unwrap();
    assert_eq!(test.images.shape(), (784, 10_000));
    assert!(test.labels.iter().all(|&l| l < 10));
    let mean: f64 = test
        .images
        .as_slice()
        .iter()
        .map(|&p| p as f64)
        .sum::<f64>()
        / test.images.as_slice().len() as f64;
    assert_relative_eq!(mean, 0.1325, epsilon = 0.002);
}
