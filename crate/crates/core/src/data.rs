//! IDX dataset loading, deterministic subsetting and Euclidean targets.
//!
//! Expected layout of an MNIST-style directory (files may carry a `.gz`
//! suffix):
//!
//! ```text
//! train-images-idx3-ubyte   train-labels-idx1-ubyte
//! t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Digests of the canonical uncompressed MNIST files.
pub const MNIST_SHA256: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

/// Raw unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX file of unsigned bytes (gzip detected from the header).
pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    parse_idx(&read_bytes(path)?, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxTensor> {
    let truncated = |expected: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let ndim = (magic & 0xff) as usize;
    // only the unsigned-byte element type is supported
    if magic >> 8 != 0x08 || ndim == 0 {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            magic,
        });
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::DimMismatch(format!(
            "{}: {} trailing bytes after a payload of {count}",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(IdxTensor {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Serializes a tensor back to IDX bytes.
pub fn encode_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = t.magic.to_be_bytes().to_vec();
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

fn expect_magic(t: &IdxTensor, magic: u32, path: &Path) -> Result<()> {
    if t.magic != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            magic: t.magic,
        });
    }
    Ok(())
}

/// Images scaled to `[0, 1]`, one flattened image per row.
pub fn load_images(path: &Path) -> Result<Array2<f64>> {
    let t = load_idx(path)?;
    expect_magic(&t, IMAGES_MAGIC, path)?;
    let n = t.dims[0];
    let d = t.dims[1..].iter().product();
    Ok(Array2::from_shape_vec((n, d), t.data.iter().map(|&b| f64::from(b) / 255.0).collect()).expect("sizes checked"))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let t = load_idx(path)?;
    expect_magic(&t, LABELS_MAGIC, path)?;
    Ok(t.data.iter().map(|&b| b as usize).collect())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange { label: l, num_classes });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Dataset directory, or a description of a generated dataset.
    pub source: String,
    pub files: Vec<FileDigest>,
    pub subset_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Training pool and test set as loaded from disk.
#[derive(Clone, Debug)]
pub struct DataPool {
    pub train: Dataset,
    pub test: Dataset,
    pub source: String,
    pub files: Vec<FileDigest>,
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads an MNIST-layout directory (MNIST or Fashion-MNIST).
pub fn load_mnist_dir(dir: &Path) -> Result<DataPool> {
    let mut files = Vec::new();
    let mut load = |stem: &str| -> Result<PathBuf> {
        let p = locate(dir, stem)?;
        files.push(FileDigest {
            file: p.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_file(&p)?,
        });
        Ok(p)
    };
    let train_x = load_images(&load("train-images-idx3-ubyte")?)?;
    let train_y = load_labels(&load("train-labels-idx1-ubyte")?)?;
    let test_x = load_images(&load("t10k-images-idx3-ubyte")?)?;
    let test_y = load_labels(&load("t10k-labels-idx1-ubyte")?)?;
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::DimMismatch(format!(
            "train images have {} pixels, test images {}",
            train_x.ncols(),
            test_x.ncols()
        )));
    }
    Ok(DataPool {
        train: Dataset::new(train_x, train_y, 10)?,
        test: Dataset::new(test_x, test_y, 10)?,
        source: dir.display().to_string(),
        files,
    })
}

/// Returns the names of files whose digest differs from the canonical MNIST one.
pub fn verify_mnist(files: &[FileDigest]) -> Vec<String> {
    files
        .iter()
        .filter(|f| {
            MNIST_SHA256
                .iter()
                .find(|(name, _)| *name == f.file)
                .is_some_and(|(_, digest)| *digest != f.sha256)
        })
        .map(|f| f.file.clone())
        .collect()
}

/// Gaussian class blobs clipped to `[0, 1]`; a small stand-in for MNIST.
pub fn synthetic_pool(num_classes: usize, dim: usize, n_pool: usize, n_test: usize, spread: f64, seed: u64) -> DataPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_simple_fn((num_classes, dim), || if rand::Rng::random_bool(&mut rng, 0.3) { 0.8 } else { 0.1 });
    let noise = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
    let mut make = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
        let mut images = Array2::zeros((n, dim));
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..dim {
                images[(i, j)] = (centers[(l, j)] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Dataset {
            images: images.select(Axis(0), &order),
            labels: order.iter().map(|&i| labels[i]).collect(),
            num_classes,
        }
    };
    let train = make(n_pool);
    let test = make(n_test);
    DataPool {
        train,
        test,
        source: format!("synthetic(classes={num_classes}, dim={dim}, spread={spread}, seed={seed})"),
        files: Vec::new(),
    }
}

/// One-hot rows times `scale`.
pub fn encode_targets(labels: &[usize], num_classes: usize, scale: f64) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::OutOfRange { label: l, num_classes });
        }
        y[(i, l)] = scale;
    }
    Ok(y)
}

/// Dataset together with its Euclidean targets.
#[derive(Clone, Debug)]
pub struct Split {
    pub data: Dataset,
    pub targets: Array2<f64>,
}

impl Split {
    pub fn new(data: Dataset, scale: f64) -> Result<Self> {
        let targets = encode_targets(&data.labels, data.num_classes, scale)?;
        Ok(Self { data, targets })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub provenance: Provenance,
}

/// Seeded disjoint index sets: the first `n_train` of a shuffled pool for
/// training, the next `n_val` for validation.
pub fn split_indices(pool_size: usize, n_train: usize, n_val: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let requested = n_train + n_val;
    if requested > pool_size {
        return Err(Error::InsufficientPool {
            pool: pool_size,
            requested,
        });
    }
    let mut order: Vec<usize> = (0..pool_size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order[n_train..requested].to_vec();
    order.truncate(n_train);
    Ok((order, val))
}

/// Training and validation subsets drawn from the training pool; the test
/// set is kept whole.
pub fn make_split(pool: &DataPool, n_train: usize, n_val: usize, seed: u64, target_scale: f64) -> Result<DatasetSplit> {
    let (train_idx, val_idx) = split_indices(pool.train.len(), n_train, n_val, seed)?;
    let train = pool.train.select(&train_idx);
    log::info!("train class counts: {:?}", train.class_counts());
    Ok(DatasetSplit {
        train: Split::new(train, target_scale)?,
        val: Split::new(pool.train.select(&val_idx), target_scale)?,
        test: Split::new(pool.test.clone(), target_scale)?,
        train_indices: train_idx,
        val_indices: val_idx,
        provenance: Provenance {
            source: pool.source.clone(),
            files: pool.files.clone(),
            subset_seed: seed,
            n_train,
            n_val,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::argmax_rows;

    #[test]
    fn idx_round_trip() {
        let t = IdxTensor {
            magic: IMAGES_MAGIC,
            dims: vec![2, 2, 2],
            data: vec![0, 1, 2, 3, 250, 251, 252, 255],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        fs::write(&p, encode_idx(&t)).unwrap();
        assert_eq!(load_idx(&p).unwrap(), t);
        let img = load_images(&p).unwrap();
        assert_eq!(img.dim(), (2, 4));
        assert_eq!(img[(1, 3)], 1.0);
    }

    #[test]
    fn gzip_is_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let t = IdxTensor {
            magic: LABELS_MAGIC,
            dims: vec![3],
            data: vec![7, 0, 9],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.gz");
        let mut enc = GzEncoder::new(fs::File::create(&p).unwrap(), flate2::Compression::default());
        enc.write_all(&encode_idx(&t)).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn malformed_files() {
        let p = Path::new("fixture");
        let mut bytes = encode_idx(&IdxTensor {
            magic: LABELS_MAGIC,
            dims: vec![4],
            data: vec![1, 2, 3, 4],
        });
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0], p),
            Err(Error::BadMagic { magic: 0x0901, .. })
        ));
        assert!(matches!(
            parse_idx(&bytes[..10], p),
            Err(Error::TruncatedFile {
                expected: 12,
                found: 10,
                ..
            })
        ));
        bytes.push(0);
        assert!(matches!(parse_idx(&bytes, p), Err(Error::DimMismatch(_))));

        // an image file handed to the label loader
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("img");
        fs::write(
            &f,
            encode_idx(&IdxTensor {
                magic: IMAGES_MAGIC,
                dims: vec![1, 1, 1],
                data: vec![0],
            }),
        )
        .unwrap();
        assert!(matches!(load_labels(&f), Err(Error::BadMagic { magic: IMAGES_MAGIC, .. })));
    }

    #[test]
    fn targets() {
        let y = encode_targets(&[3], 10, 1.0).unwrap();
        assert_eq!(y[(0, 3)], 1.0);
        assert_eq!(y.sum(), 1.0);
        assert!(encode_targets(&[3, 1], 10, 0.0).unwrap().iter().all(|&v| v == 0.0));
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(argmax_rows(&encode_targets(&labels, 10, 2.0).unwrap()), labels);
        assert!(matches!(
            encode_targets(&[10], 10, 1.0),
            Err(Error::OutOfRange {
                label: 10,
                num_classes: 10
            })
        ));
    }

    #[test]
    fn split_partitions_exactly() {
        let (t, v) = split_indices(30, 10, 20, 5).unwrap();
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split_indices(30, 10, 20, 5).unwrap(), (t, v));
        assert!(matches!(
            split_indices(30, 20, 11, 0),
            Err(Error::InsufficientPool { pool: 30, requested: 31 })
        ));
    }

    #[test]
    fn synthetic_pool_is_balanced_and_bounded() {
        let pool = synthetic_pool(4, 12, 400, 80, 0.1, 3);
        assert_eq!(pool.train.class_counts(), vec![100; 4]);
        assert!(pool.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let split = make_split(&pool, 100, 50, 1, 1.0).unwrap();
        assert_eq!(split.train.len(), 100);
        assert_eq!(split.val.len(), 50);
        assert_eq!(split.test.len(), 80);
        assert_eq!(split.train.targets.dim(), (100, 4));
    }
}
