//! Dataset generation, MNIST IDX ingestion, dequantization, and the
//! semi-supervised split protocol.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dataset split into a labeled part `L`, an unlabeled part `U` whose
/// labels are withheld from training (kept only as provenance for probes
/// and error reporting), and a held-out test set.
#[derive(Debug, Clone)]
pub struct SemiDataset {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
    /// Ground-truth labels of `U`, never shown to the trainer.
    pub unlabeled_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub k: usize,
    pub split_seed: u64,
    /// True when features are raw byte values (0..=255) that must be
    /// dequantized before entering the flow.
    pub quantized: bool,
}

impl SemiDataset {
    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.rows()
    }

    pub fn dim(&self) -> usize {
        self.labeled_x.cols()
    }
}

/// Two interleaving half-circles with isotropic Gaussian noise.
/// Class 0 lies on the upper unit half-circle, class 1 on the offset lower
/// one; `n/2` points per class (class 0 takes the remainder).
pub fn gen_moons(n: usize, noise: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = n - n / 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random::<f64>() * std::f64::consts::PI;
        let (x, y, label) = if i < n0 {
            (theta.cos(), theta.sin(), 0)
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin(), 1)
        };
        data.push(x);
        data.push(y);
        labels.push(label);
    }
    add_noise(&mut data, noise, &mut rng);
    (Tensor::new(vec![n, 2], data).expect("moons shape"), labels)
}

// Noise is applied in a second pass so the angle stream is identical for
// any noise level at a fixed seed.
fn add_noise<R: Rng>(data: &mut [f64], noise: f64, rng: &mut R) {
    if noise > 0.0 {
        for v in data.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v += g * noise;
        }
    }
}

/// Concentric circles: class 0 on the unit circle, class 1 at
/// `radius_ratio`, plus isotropic Gaussian noise.
pub fn gen_circles(n: usize, noise: f64, radius_ratio: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = n - n / 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let (r, label) = if i < n0 { (1.0, 0) } else { (radius_ratio, 1) };
        data.push(r * theta.cos());
        data.push(r * theta.sin());
        labels.push(label);
    }
    add_noise(&mut data, noise, &mut rng);
    (Tensor::new(vec![n, 2], data).expect("circles shape"), labels)
}

/// Select `n_labeled` examples (class-balanced when the budget divides the
/// class count), hide the labels of the rest.
pub fn semi_split(
    objects: &Tensor,
    labels: &[usize],
    k: usize,
    n_labeled: usize,
    seed: u64,
) -> Result<SemiDataset> {
    let n = objects.rows();
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "semi_split: {n} objects but {} labels",
            labels.len()
        )));
    }
    if n_labeled > n {
        return Err(Error::Argument(format!(
            "semi_split: n_labeled {n_labeled} exceeds dataset size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Argument(format!("semi_split: label {y} out of range (K={k})")));
        }
        per_class[y].push(i);
    }
    // per-class quotas: even split, remainder distributed by class index
    let mut quota = vec![n_labeled / k; k];
    for item in quota.iter_mut().take(n_labeled % k) {
        *item += 1;
    }
    let mut chosen = vec![false; n];
    let mut labeled_idx = Vec::with_capacity(n_labeled);
    for (c, idxs) in per_class.iter_mut().enumerate() {
        if idxs.len() < quota[c] {
            return Err(Error::Argument(format!(
                "semi_split: class {c} has {} examples, quota is {}",
                idxs.len(),
                quota[c]
            )));
        }
        shuffle(idxs, &mut rng);
        for &i in idxs.iter().take(quota[c]) {
            chosen[i] = true;
            labeled_idx.push(i);
        }
    }
    labeled_idx.sort_unstable();
    let unlabeled_idx: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    let labeled_y = labeled_idx.iter().map(|&i| labels[i]).collect();
    let unlabeled_y = unlabeled_idx.iter().map(|&i| labels[i]).collect();
    Ok(SemiDataset {
        labeled_x: objects.take_rows(&labeled_idx),
        labeled_y,
        unlabeled_x: objects.take_rows(&unlabeled_idx),
        unlabeled_y,
        test_x: Tensor::zeros(vec![0, objects.cols()]),
        test_y: Vec::new(),
        k,
        split_seed: seed,
        quantized: false,
    })
}

pub fn shuffle<T, R: Rng>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Parsed IDX container.
#[derive(Debug, Clone)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Read an IDX file (unsigned-byte payload, big-endian dimension sizes).
pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let fail = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(0, "bad IDX magic (expected 0x00 0x00)"));
    }
    if bytes[2] != 0x08 {
        return Err(fail(2, &format!("unsupported IDX type byte 0x{:02x} (want 0x08)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail(bytes.len(), "truncated IDX dimension table"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        dims.push(v as usize);
    }
    let want: usize = dims.iter().product();
    if bytes.len() < header + want {
        return Err(fail(bytes.len(), &format!("truncated IDX payload (want {want} bytes)")));
    }
    Ok(IdxFile {
        dims,
        data: bytes[header..header + want].to_vec(),
    })
}

/// Images as an (N, 1, 28, 28) tensor of byte values promoted to floats.
pub fn idx_images(file: &IdxFile) -> Result<Tensor> {
    if file.dims.len() != 3 {
        return Err(Error::Format {
            offset: 3,
            msg: format!("expected 3-D image file, got {} dims", file.dims.len()),
        });
    }
    let (n, h, w) = (file.dims[0], file.dims[1], file.dims[2]);
    let data = file.data.iter().map(|&b| b as f64).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Labels as class indices 0..=9.
pub fn idx_labels(file: &IdxFile) -> Result<Vec<usize>> {
    if file.dims.len() != 1 {
        return Err(Error::Format {
            offset: 3,
            msg: format!("expected 1-D label file, got {} dims", file.dims.len()),
        });
    }
    file.data
        .iter()
        .map(|&b| {
            if b > 9 {
                Err(Error::Format {
                    offset: 0,
                    msg: format!("label byte {b} outside 0..=9"),
                })
            } else {
                Ok(b as usize)
            }
        })
        .collect()
}

/// `(byte + u) / 256` with `u ~ Uniform[0,1)`, mapping integer pixels into
/// `[0, 1)`. The matching change-of-measure constant for likelihoods on the
/// byte grid is `d * ln 256` per example (see [`bits_per_dim`]).
pub fn dequantize<R: Rng>(bytes: &Tensor, rng: &mut R) -> Tensor {
    bytes.map_with(|b| {
        let u: f64 = rng.random();
        (b + u) / 256.0
    })
}

/// Base-2 negative log-likelihood per input dimension. For quantized data
/// the `d * ln 256` dequantization term is folded in so the number refers
/// to the discrete pixel distribution.
pub fn bits_per_dim(nll_nats: f64, d: usize, quantized: bool) -> f64 {
    let extra = if quantized { d as f64 * (256.0f64).ln() } else { 0.0 };
    (nll_nats + extra) / (d as f64 * std::f64::consts::LN_2)
}

/// Offset between a config seed and the seed of its generated test set.
pub const TEST_SEED_OFFSET: u64 = 1000;

/// Materialize the dataset a config describes: generated toy data with a
/// fresh test set, or MNIST files from disk (first `n_train` training
/// images, first `n_test` test images, 0 = all).
pub fn dataset_from_config(cfg: &crate::config::TrainConfig) -> Result<SemiDataset> {
    match cfg.dataset.as_str() {
        "moons" | "circles" => {
            let gen = |n: usize, seed: u64| {
                if cfg.dataset == "moons" {
                    gen_moons(n, cfg.noise, seed)
                } else {
                    gen_circles(n, cfg.noise, cfg.radius_ratio, seed)
                }
            };
            let (x, y) = gen(cfg.n_train, cfg.seed);
            let mut ds = semi_split(&x, &y, cfg.classes, cfg.n_labeled, cfg.seed)?;
            let (tx, ty) = gen(cfg.n_test, cfg.seed + TEST_SEED_OFFSET);
            ds.test_x = tx;
            ds.test_y = ty;
            Ok(ds)
        }
        "mnist" => {
            let mnist = load_mnist(std::path::Path::new(&cfg.mnist_dir))?;
            let n = if cfg.n_train == 0 {
                mnist.train_x.rows()
            } else {
                cfg.n_train.min(mnist.train_x.rows())
            };
            let idx: Vec<usize> = (0..n).collect();
            let x = mnist.train_x.take_rows(&idx);
            let y = mnist.train_y[..n].to_vec();
            let mut ds = semi_split(&x, &y, cfg.classes, cfg.n_labeled, cfg.seed)?;
            let nt = if cfg.n_test == 0 {
                mnist.test_x.rows()
            } else {
                cfg.n_test.min(mnist.test_x.rows())
            };
            let tidx: Vec<usize> = (0..nt).collect();
            ds.test_x = mnist.test_x.take_rows(&tidx);
            ds.test_y = mnist.test_y[..nt].to_vec();
            ds.quantized = true;
            Ok(ds)
        }
        other => Err(Error::Argument(format!("unknown dataset {other:?}"))),
    }
}

/// MNIST file quartet loaded from a directory with the canonical names.
pub struct MnistData {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

pub fn load_mnist(dir: &Path) -> Result<MnistData> {
    let load_pair = |img: &str, lab: &str| -> Result<(Tensor, Vec<usize>)> {
        let imgs = idx_images(&read_idx(&dir.join(img))?)?;
        let labs = idx_labels(&read_idx(&dir.join(lab))?)?;
        let n = imgs.shape()[0];
        if labs.len() != n {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{img}: {n} images but {} labels", labs.len()),
            });
        }
        let d: usize = imgs.shape()[1..].iter().product();
        Ok((imgs.reshaped(vec![n, d])?, labs))
    };
    let (train_x, train_y) = load_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_x, test_y) = load_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok(MnistData {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

impl Tensor {
    /// Like `map` but the closure may consult external state per element.
    pub fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor::new(
            self.shape().to_vec(),
            self.as_slice().iter().map(|&v| f(v)).collect(),
        )
        .expect("map_with shape")
    }
}
