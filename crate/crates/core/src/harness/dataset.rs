//! Dataset ingestion: IDX files, a synthetic Gaussian-cluster generator, and
//! the seeded validation/test split of the test pool.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// IDX `ubyte` files; images become `[1, rows, cols]` scaled to `[0, 1]`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    /// Gaussian clusters around one random prototype per class.
    Synthetic {
        classes: usize,
        train_size: usize,
        test_size: usize,
        shape: Vec<usize>,
        /// Standard deviation of the per-example noise.
        noise: f32,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            DataSource::Synthetic {
                classes,
                train_size,
                test_size,
                shape,
                noise,
                ..
            } => {
                if *classes < 2 || *train_size == 0 || *test_size < 2 {
                    return Err(Error::Config(
                        "synthetic data needs >= 2 classes, a training set, and >= 2 test examples".into(),
                    ));
                }
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::Config(format!("invalid synthetic shape {shape:?}")));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::Config(format!("invalid synthetic noise {noise}")));
                }
            }
        }
        Ok(())
    }
}

/// Loads the training set and splits the test pool into validation and test
/// sets by a seeded shuffle. The training set is left untouched.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let (train, pool) = match &spec.source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => {
            let (train_x, train_y) = (read_idx_images(train_images)?, read_idx_labels(train_labels)?);
            let (test_x, test_y) = (read_idx_images(test_images)?, read_idx_labels(test_labels)?);
            let classes = num_classes.unwrap_or_else(|| {
                train_y.iter().chain(&test_y).copied().max().map_or(1, |m| m + 1)
            });
            (
                Dataset::new(train_x, train_y, classes)?,
                Dataset::new(test_x, test_y, classes)?,
            )
        }
        DataSource::Synthetic {
            classes,
            train_size,
            test_size,
            shape,
            noise,
            seed,
        } => synthetic_clusters(*classes, *train_size, *test_size, shape, *noise, *seed)?,
    };
    let (validation, test) = split_pool(&pool, spec.validation_fraction, spec.split_seed)?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

/// Seeded shuffle of the pool; the first `round(fraction * n)` examples form
/// the validation set and the rest the test set.
pub fn split_pool(pool: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = pool.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "test pool of {n} examples cannot be split with validation fraction {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, test) = order.split_at(n_val);
    Ok((pool.subset(val)?, pool.subset(test)?))
}

/// Train and test sets drawn around shared per-class prototypes. Labels cycle
/// `0, 1, ..., classes - 1`, so sizes divisible by `classes` are balanced.
pub fn synthetic_clusters(
    classes: usize,
    train_size: usize,
    test_size: usize,
    shape: &[usize],
    noise: f32,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let dim: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut data = Vec::with_capacity(n * dim);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        for &label in &labels {
            for &p in &prototypes[label] {
                let z: f32 = StandardNormal.sample(&mut rng);
                data.push(p + noise * z);
            }
        }
        let mut full = vec![n];
        full.extend_from_slice(shape);
        Dataset::new(Tensor::new(full, data)?, labels, classes)
    };
    Ok((draw(train_size, 1)?, draw(test_size, 2)?))
}

/// Header and raw payload of an IDX `ubyte` file.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let mut r = ByteReader::new(bytes);
    let zero = r.take(2, "magic")?;
    if zero != [0, 0] {
        return Err(Error::parse(0, "IDX magic must start with two zero bytes"));
    }
    let type_code = r.u8("type code")?;
    if type_code != 0x08 {
        return Err(Error::parse(
            2,
            format!("unsupported IDX element type {type_code:#04x} (only unsigned byte 0x08)"),
        ));
    }
    let ndims = r.u8("dimension count")? as usize;
    if ndims == 0 {
        return Err(Error::parse(3, "IDX file declares zero dimensions"));
    }
    let dims = (0..ndims)
        .map(|_| r.u32_be("dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(4, "IDX dimensions overflow"))?;
    let payload = r.take(len, "payload")?;
    r.finish()?;
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// `[n, rows, cols]` images as `[n, 1, rows, cols]` in `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (dims, payload) = parse_idx(&bytes)?;
    let shape = match dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => {
            return Err(Error::parse(
                3,
                format!("expected 3 or 4 image dimensions, got {dims:?}"),
            ))
        }
    };
    Tensor::new(shape, payload.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let (dims, payload) = parse_idx(&bytes)?;
    if dims.len() != 1 {
        return Err(Error::parse(3, format!("expected 1 label dimension, got {dims:?}")));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, dims.len() as u8];
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn parses_idx_header() {
        let bytes = idx_bytes(&[2, 2, 3], &[0, 255, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let (dims, payload) = parse_idx(&bytes).unwrap();
        assert_eq!(dims, vec![2, 2, 3]);
        assert_eq!(payload.len(), 12);
    }

    #[test]
    fn malformed_idx_reports_offsets() {
        let mut bad_type = idx_bytes(&[2], &[0, 1]);
        bad_type[2] = 0x0D;
        assert!(matches!(parse_idx(&bad_type), Err(Error::Parse { offset: 2, .. })));
        let short = idx_bytes(&[4], &[0, 1]);
        assert!(matches!(parse_idx(&short), Err(Error::Parse { offset: 8, .. })));
        let truncated_header = &idx_bytes(&[4, 4], &[])[..6];
        assert!(matches!(parse_idx(truncated_header), Err(Error::Parse { offset: 4, .. })));
        let trailing = idx_bytes(&[1], &[0, 9]);
        assert!(matches!(parse_idx(&trailing), Err(Error::Parse { offset: 9, .. })));
    }

    #[test]
    fn idx_files_load() {
        let tmp = tempfile::tempdir().unwrap();
        let img = tmp.path().join("img");
        let lbl = tmp.path().join("lbl");
        std::fs::write(&img, idx_bytes(&[2, 1, 2], &[0, 255, 51, 102])).unwrap();
        std::fs::write(&lbl, idx_bytes(&[2], &[3, 1])).unwrap();
        let x = read_idx_images(&img).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(read_idx_labels(&lbl).unwrap(), vec![3, 1]);
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let (train, _) = synthetic_clusters(4, 512, 8, &[3], 0.5, 9).unwrap();
        let mut hist = [0usize; 4];
        for &l in train.labels() {
            hist[l] += 1;
        }
        assert_eq!(hist, [128; 4]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = DatasetSpec {
            source: DataSource::Synthetic {
                classes: 4,
                train_size: 40,
                test_size: 1000,
                shape: vec![2],
                noise: 1.0,
                seed: 3,
            },
            validation_fraction: 0.2,
            split_seed: 11,
        };
        let a = load_dataset(&spec).unwrap();
        let b = load_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.validation.len(), 200);
        assert_eq!(a.test.len(), 800);
        assert_eq!(a.train.len(), 40);
        // every pool row lands in exactly one split
        let (_, pool) = synthetic_clusters(4, 40, 1000, &[2], 1.0, 3).unwrap();
        let key = |row: &[f32]| row.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut seen: Vec<Vec<u32>> = a
            .validation
            .inputs()
            .data()
            .chunks(2)
            .chain(a.test.inputs().data().chunks(2))
            .map(key)
            .collect();
        let mut all: Vec<Vec<u32>> = pool.inputs().data().chunks(2).map(key).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
    }
}
