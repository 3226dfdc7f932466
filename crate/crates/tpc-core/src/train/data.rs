//! Dataset plumbing: seeded synthetic blobs, the standard 3073-byte binary
//! image format, and directories of raw tensor records.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_tensor, TensorError};

const CIFAR_RECORD: usize = 3073; // 1 label byte + 32*32*3 pixel bytes

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated record at byte offset {offset} (record size {record})")]
    Truncated {
        path: PathBuf,
        offset: u64,
        record: usize,
    },
    #[error("{path}: label {label} outside 0..{classes}")]
    BadLabel {
        path: PathBuf,
        label: usize,
        classes: usize,
    },
    #[error("{path}: cannot parse label from file name (expected <stem>_<label>.tensor)")]
    BadFileName { path: PathBuf },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset source {0:?} requires a path")]
    MissingPath(DataSource),
}

/// One decoded sample: channel-major pixels and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    SyntheticBlobs,
    Cifar10Binary,
    TensorDir,
}

/// Declarative dataset description; [`DatasetSpec::load`] materializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// File or directory, required for the file-backed sources.
    pub path: Option<PathBuf>,
    pub classes: usize,
    /// Samples per class for the synthetic source.
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Fraction of shuffled samples that form the training split.
    pub train_fraction: f64,
    pub shuffle_seed: u64,
    /// Mean/std applied as `(x - mean) / std` after decoding.
    pub normalize: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::SyntheticBlobs,
            path: None,
            classes: 2,
            per_class: 64,
            image_size: 8,
            channels: 1,
            train_fraction: 0.8,
            shuffle_seed: 0,
            normalize: (0.0, 1.0),
        }
    }
}

impl DatasetSpec {
    /// Decode the full sample set (unshuffled, unsplit).
    pub fn load(&self) -> Result<Dataset, DataError> {
        let mut ds = match self.source {
            DataSource::SyntheticBlobs => synthetic_blobs(
                self.image_size,
                self.channels,
                self.classes,
                self.per_class,
                self.shuffle_seed,
            ),
            DataSource::Cifar10Binary => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or(DataError::MissingPath(self.source))?;
                ingest_cifar10(path)?
            }
            DataSource::TensorDir => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or(DataError::MissingPath(self.source))?;
                ingest_tensor_dir(path, self.classes, self.image_size, self.channels)?
            }
        };
        if ds.is_empty() {
            return Err(DataError::Empty);
        }
        let (mean, std) = self.normalize;
        if (mean, std) != (0.0, 1.0) {
            for ex in &mut ds.examples {
                for v in &mut ex.image {
                    *v = (*v - mean) / std;
                }
            }
        }
        Ok(ds)
    }

    /// Shuffle with the configured seed and split off the training fraction.
    pub fn load_split(&self) -> Result<(Dataset, Dataset), DataError> {
        let ds = self.load()?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        order.shuffle(&mut rng);
        let cut = ((ds.len() as f64 * self.train_fraction).round() as usize)
            .clamp(1, ds.len());
        let pick = |idx: &[usize]| Dataset {
            examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
            classes: ds.classes,
            image_size: ds.image_size,
            channels: ds.channels,
        };
        let train = pick(&order[..cut]);
        let eval = if cut == ds.len() {
            train.clone()
        } else {
            pick(&order[cut..])
        };
        Ok((train, eval))
    }
}

/// Seeded Gaussian-blob classification set: class `c` places a bright blob
/// at a class-specific position on an otherwise dark noisy image.
pub fn synthetic_blobs(
    image_size: usize,
    channels: usize,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed);
    let s = image_size as f64;
    let sigma = s / 6.0;
    let mut examples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let cx = s / 2.0 + (s / 4.0) * angle.cos();
        let cy = s / 2.0 + (s / 4.0) * angle.sin();
        for _ in 0..per_class {
            let jx = cx + rng.gen_range(-0.5..0.5);
            let jy = cy + rng.gen_range(-0.5..0.5);
            let mut image = Vec::with_capacity(channels * image_size * image_size);
            for _ in 0..channels {
                for y in 0..image_size {
                    for x in 0..image_size {
                        let dx = x as f64 + 0.5 - jx;
                        let dy = y as f64 + 0.5 - jy;
                        let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        image.push(v + rng.gen_range(-0.05..0.05));
                    }
                }
            }
            examples.push(Example { image, label: class });
        }
    }
    Dataset { examples, classes, image_size, channels }
}

/// Decode one or more files of 3073-byte records (1 label byte followed by
/// 3072 channel-major pixel bytes). A directory decodes every `*.bin` file
/// in name order.
pub fn ingest_cifar10(path: &Path) -> Result<Dataset, DataError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| DataError::Io { path: path.into(), source: e })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut examples = Vec::new();
    for file in &files {
        let mut bytes = Vec::new();
        fs::File::open(file)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DataError::Io { path: file.clone(), source: e })?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Truncated {
                path: file.clone(),
                offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(DataError::BadLabel {
                    path: file.clone(),
                    label,
                    classes: 10,
                });
            }
            let image = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            examples.push(Example { image, label });
        }
    }
    Ok(Dataset { examples, classes: 10, image_size: 32, channels: 3 })
}

/// Decode a directory of `<stem>_<label>.tensor` records in name order.
pub fn ingest_tensor_dir(
    path: &Path,
    classes: usize,
    image_size: usize,
    channels: usize,
) -> Result<Dataset, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| DataError::Io { path: path.into(), source: e })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "tensor"))
        .collect();
    files.sort();
    let mut examples = Vec::new();
    for file in &files {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DataError::BadFileName { path: file.clone() })?;
        let label: usize = stem
            .rsplit('_')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::BadFileName { path: file.clone() })?;
        if label >= classes {
            return Err(DataError::BadLabel { path: file.clone(), label, classes });
        }
        let mut f = fs::File::open(file)
            .map_err(|e| DataError::Io { path: file.clone(), source: e })?;
        let raw = read_tensor(&mut f)
            .map_err(|e| DataError::Tensor { path: file.clone(), source: e })?;
        examples.push(Example { image: raw.data, label });
    }
    Ok(Dataset { examples, classes, image_size, channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{write_tensor, DType, RawTensor};

    #[test]
    fn blobs_are_seeded_and_balanced() {
        let a = synthetic_blobs(8, 1, 2, 10, 3);
        let b = synthetic_blobs(8, 1, 2, 10, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!(a.examples.iter().filter(|e| e.label == 0).count(), 10);
        assert_ne!(a, synthetic_blobs(8, 1, 2, 10, 4));
    }

    #[test]
    fn blob_classes_differ_in_brightness_centroid() {
        let ds = synthetic_blobs(8, 1, 2, 5, 1);
        let centroid = |img: &[f64]| -> (f64, f64) {
            let total: f64 = img.iter().map(|v| v.max(0.0)).sum();
            let mut cx = 0.0;
            let mut cy = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let w = img[y * 8 + x].max(0.0);
                    cx += w * x as f64;
                    cy += w * y as f64;
                }
            }
            (cx / total, cy / total)
        };
        let c0 = centroid(&ds.examples[0].image);
        let c1 = centroid(&ds.examples[5].image);
        let dist = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
        assert!(dist > 2.0, "classes not separated: {dist}");
    }

    #[test]
    fn cifar_records_decode_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("batch_1.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD * 2];
        bytes[0] = 9; // label
        bytes[1] = 255; // first pixel
        bytes[CIFAR_RECORD] = 3;
        fs::write(&file, &bytes).unwrap();
        let ds = ingest_cifar10(&file).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].label, 9);
        assert_eq!(ds.examples[0].image[0], 1.0);
        assert_eq!(ds.examples[1].label, 3);
        assert_eq!(ds.examples[0].image.len(), 3072);
    }

    #[test]
    fn truncated_cifar_record_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.bin");
        fs::write(&file, vec![0u8; CIFAR_RECORD + 100]).unwrap();
        match ingest_cifar10(&file) {
            Err(DataError::Truncated { offset, .. }) => {
                assert_eq!(offset, CIFAR_RECORD as u64)
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_rejects_label_above_nine() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad_label.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        fs::write(&file, &bytes).unwrap();
        assert!(matches!(
            ingest_cifar10(&file),
            Err(DataError::BadLabel { label: 10, .. })
        ));
    }

    #[test]
    fn tensor_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, label) in [(0usize, 1usize), (1, 0)] {
            let raw = RawTensor::new(DType::F64, vec![1, 4, 4], vec![i as f64; 16]);
            let mut f = fs::File::create(dir.path().join(format!("img{i}_{label}.tensor"))).unwrap();
            write_tensor(&mut f, &raw).unwrap();
        }
        let ds = ingest_tensor_dir(dir.path(), 2, 4, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].label, 1);
        assert_eq!(ds.examples[1].label, 0);
        assert_eq!(ds.examples[1].image, vec![1.0; 16]);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let spec = DatasetSpec { per_class: 16, ..DatasetSpec::default() };
        let (train, eval) = spec.load_split().unwrap();
        assert_eq!(train.len() + eval.len(), 32);
        assert_eq!(train.len(), 26); // 0.8 * 32, rounded
        let (train2, _) = spec.load_split().unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn spec_rejects_unknown_keys_and_missing_paths() {
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"sorce": "x"}"#).is_err());
        let spec = DatasetSpec {
            source: DataSource::Cifar10Binary,
            ..DatasetSpec::default()
        };
        assert!(matches!(spec.load(), Err(DataError::MissingPath(_))));
    }
}
