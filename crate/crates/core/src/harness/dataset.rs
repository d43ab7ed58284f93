use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::{self, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensornet::{Batch, Shape};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as flat `f64` in NCHW order plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.shape.len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Batch {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = batch_size.max(1);
        (0..self.len().div_ceil(size)).map(move |b| {
            let end = ((b + 1) * size).min(idx.len());
            self.batch(&idx[b * size..end])
        })
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let per = self.shape.len();
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images: self.images[start * per..end * per].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn pixel_mean(&self) -> f64 {
        if self.images.is_empty() {
            0.0
        } else {
            self.images.iter().sum::<f64>() / self.images.len() as f64
        }
    }

    pub fn subtract(&mut self, mean: f64) {
        for x in &mut self.images {
            *x -= mean;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub validation: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// MNIST-style IDX files. The first `train` samples train, the next
    /// `validation` samples validate, unless separate validation files are
    /// given.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        validation_images: Option<PathBuf>,
        #[serde(default)]
        validation_labels: Option<PathBuf>,
        train: usize,
        validation: usize,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        train: usize,
        validation: usize,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Idx { images, .. } => format!("idx:{}", images.display()),
            DatasetSpec::Synthetic { spec, .. } => {
                format!("synthetic:seed={},classes={},size={}", spec.seed, spec.classes, spec.size)
            }
        }
    }
}

/// Loads and splits a dataset; pixels are scaled to `[0, 1]` and centred on
/// the training-set mean.
pub fn load_dataset(spec: &DatasetSpec) -> Result<DataSplit> {
    let (mut train, mut validation) = match spec {
        DatasetSpec::Synthetic {
            spec,
            train,
            validation,
        } => {
            let all = synthetic::generate(&SyntheticSpec {
                samples: train + validation,
                ..spec.clone()
            });
            (all.slice(0, *train), all.slice(*train, train + validation))
        }
        DatasetSpec::Idx {
            images,
            labels,
            validation_images,
            validation_labels,
            train,
            validation,
        } => {
            let all = read_idx_pair(images, labels)?;
            let (tr, va) = match (validation_images, validation_labels) {
                (Some(vi), Some(vl)) => {
                    let va = read_idx_pair(vi, vl)?;
                    (all, va)
                }
                (None, None) => {
                    let tr = all.slice(0, (*train).min(all.len()));
                    let va = all.slice(tr.len(), (tr.len() + validation).min(all.len()));
                    (tr, va)
                }
                _ => {
                    return Err(Error::Config(
                        "validation_images and validation_labels go together".into(),
                    ))
                }
            };
            let tr = tr.slice(0, (*train).min(tr.len()));
            let va = va.slice(0, (*validation).min(va.len()));
            let classes = tr.num_classes.max(va.num_classes);
            (
                Dataset {
                    num_classes: classes,
                    ..tr
                },
                Dataset {
                    num_classes: classes,
                    ..va
                },
            )
        }
    };
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mean = train.pixel_mean();
    train.subtract(mean);
    validation.subtract(mean);
    Ok(DataSplit { train, validation })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (shape, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let label_vals = parse_idx_labels(&read_file(labels)?, labels)?;
    if label_vals.len() != pixels.len() / shape.len() {
        return Err(Error::Config(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            pixels.len() / shape.len(),
            labels.display(),
            label_vals.len()
        )));
    }
    let num_classes = label_vals.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        shape,
        num_classes,
        images: pixels,
        labels: label_vals,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: offset as u64 + 4,
            actual: bytes.len() as u64,
        })
}

/// Parses an IDX3 unsigned-byte image file into `[0, 1]` pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Shape, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16u64 + (count as u64) * (rows as u64) * (cols as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Shape::new(1, rows, cols), pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as u64;
    let expected = 8 + count;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Encodes images (`[0, 1]` pixels, rounded to bytes) as an IDX3 file.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[f64]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_sized_header_parses() {
        let (count, rows, cols) = (60_000usize, 28usize, 28usize);
        let mut bytes = Vec::with_capacity(16 + count * rows * cols);
        for v in [0x0803u32, count as u32, rows as u32, cols as u32] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.resize(16 + count * rows * cols, 255);
        let (shape, pixels) = parse_idx_images(&bytes, Path::new("train-images")).unwrap();
        assert_eq!(shape, Shape::new(1, 28, 28));
        assert_eq!(pixels.len() / shape.len(), 60_000);
        assert_eq!(pixels[0], 1.0);
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let mut bytes = encode_idx_images(2, 2, &[0.0; 12]);
        bytes.truncate(20);
        match parse_idx_images(&bytes, Path::new("t")) {
            Err(Error::Truncated {
                expected, actual, ..
            }) => assert_eq!((expected, actual), (28, 20)),
            other => panic!("unexpected {other:?}"),
        }
        let msg = parse_idx_images(&bytes, Path::new("t")).unwrap_err().to_string();
        assert!(msg.contains("expected 28 bytes, found 20"), "{msg}");
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8, 1, 0, 0], Path::new("l")),
            Err(Error::Truncated { expected: 8, actual: 6, .. })
        ));
    }

    #[test]
    fn wrong_magic_reports_offset() {
        let bytes = encode_idx_labels(&[1, 2]);
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }

    #[test]
    fn idx_files_load_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..5 * 9).map(|i| (i % 7) as f64 / 6.0).collect();
        let labels = vec![0, 1, 2, 1, 0];
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        fs::write(&ip, encode_idx_images(3, 3, &pixels)).unwrap();
        fs::write(&lp, encode_idx_labels(&labels)).unwrap();
        let split = load_dataset(&DatasetSpec::Idx {
            images: ip,
            labels: lp,
            validation_images: None,
            validation_labels: None,
            train: 3,
            validation: 2,
        })
        .unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.validation.len(), 2);
        assert_eq!(split.train.num_classes, 3);
        assert_eq!(split.validation.labels, vec![1, 0]);
        assert!(split.train.pixel_mean().abs() < 1e-12);
        let range = split.train.images.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
            - split.train.images.iter().fold(f64::INFINITY, |m, &x| m.min(x));
        assert!(range <= 1.0 + 1e-12);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_idx_pair(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
