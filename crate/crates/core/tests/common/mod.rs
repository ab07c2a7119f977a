#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&28u32.to_be_bytes());
    out.extend_from_slice(&28u32.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Each class lights a different 6x6 block; pixel noise keeps it non-trivial.
fn sample(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        let (bx, by) = (2 + 8 * (label as usize % 3), 2 + 6 * (label as usize / 3));
        let mut img = vec![0u8; 784];
        for (p, px) in img.iter_mut().enumerate() {
            let (x, y) = (p % 28, p / 28);
            let inside = (bx..bx + 6).contains(&x) && (by..by + 6).contains(&y);
            let base: u8 = if inside { 180 } else { 0 };
            *px = base.saturating_add(rng.random_range(0..60));
        }
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

/// Write MNIST-named IDX files with `n_train` and `n_test` examples into `dir`.
pub fn write_synthetic(dir: &Path, n_train: usize, n_test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (tr_i, tr_l) = sample(&mut rng, n_train);
    let (te_i, te_l) = sample(&mut rng, n_test);
    std::fs::write(dir.join("train-images-idx3-ubyte"), idx_images(&tr_i)).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), idx_labels(&tr_l)).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), idx_images(&te_i)).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_labels(&te_l)).unwrap();
}

/// Writes the small synthetic set to a fresh directory. Clears the data
/// directory override so loads go where the config points.
pub fn synthetic_dir() -> tempfile::TempDir {
    static CLEAR_OVERRIDE: std::sync::Once = std::sync::Once::new();
    CLEAR_OVERRIDE.call_once(|| std::env::remove_var(fedsim::harness::config::DATA_DIR_ENV));
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), 600, 200);
    dir
}

/// Quick config over the synthetic data in `data_dir`.
pub fn small_config(name: &str, data_dir: &Path, extra: &str) -> String {
    format!(
        r#"name = "{name}"
seed = 5
rounds = 4
repeats = 2

[data]
dir = "{}"

[model]
layers = [784, 16, 10]

[clients]
count = 4
local_iterations = 5
batch_size = 10
learning_rate = 0.1
{extra}
"#,
        data_dir.display()
    )
}

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

use fedsim::data;
use fedsim::harness::config::RunConfig;
use fedsim::harness::runner::Datasets;
use fedsim::model::{self, Batch};
use fedsim::seed::{Purpose, SeedPath};
use rand::seq::SliceRandom;

/// Plain minibatch SGD on the whole training set, drawing every random
/// choice from the same seed coordinates the simulator uses for a single
/// client. Returns `(accuracy, loss)` per round for one repeat.
pub fn centralized_sgd(cfg: &RunConfig, data: &Datasets, repeat: usize) -> Vec<(f64, f64)> {
    let spec = cfg.model_spec().unwrap();
    let seeds = SeedPath::new(cfg.seed).repeat(repeat);
    let (_, report) =
        data.test.split_validation(cfg.data.validation_fraction, &mut seeds.rng(Purpose::Validation)).unwrap();
    let order = data::partition_iid(data.train.len(), 1, &mut seeds.rng(Purpose::Partition)).unwrap();
    let examples = order.shard(0).to_vec();
    let mut params = spec.init_params(&mut seeds.rng(Purpose::Init));
    let batch_size = cfg.clients.batch_size.min(examples.len());
    let mut out = Vec::new();
    for round in 1..=cfg.rounds {
        let mut rng = seeds.round(round).client(0).rng(Purpose::LocalTrain);
        let mut perm = examples.clone();
        perm.shuffle(&mut rng);
        let mut cursor = 0;
        for _ in 0..cfg.clients.local_iterations {
            if cursor + batch_size > perm.len() {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &perm[cursor..cursor + batch_size];
            cursor += batch_size;
            let dim = data.train.input_dim();
            let mut pixels = Vec::with_capacity(idx.len() * dim);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                pixels.extend_from_slice(data.train.image(i));
                labels.push(data.train.labels()[i]);
            }
            let batch = Batch::new(&pixels, &labels, dim).unwrap();
            let (_, grad) = model::loss_and_gradient(&params, &spec, &batch).unwrap();
            params = model::sgd_step(&params, &grad, cfg.clients.learning_rate).unwrap();
        }
        out.push(model::evaluate_batch(&params, &spec, &report.as_batch().unwrap()).unwrap());
    }
    out
}
