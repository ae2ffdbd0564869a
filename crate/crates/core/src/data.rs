//! Datasets: a seeded synthetic template task, an IDX (MNIST-style) codec,
//! and shuffled batching.

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const DEFAULT_NOISE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { file: String, found: u32, expected: u32 },
    #[error("{file}: truncated ({got} bytes, need {need})")]
    Truncated { file: String, got: usize, need: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image {got:?} does not fit model input {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Images `[count, C, H, W]` in `[-1, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let images = Tensor::new(shape, data).expect("gathered shape is consistent");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }

    pub fn check(&self) -> Result<(), DataError> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(DataError::CountMismatch {
                images: self.images.shape()[0],
                labels: self.labels.len(),
            });
        }
        Ok(())
    }
}

/// Shape of a synthetic task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticShape {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
}

impl SyntheticShape {
    fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }
}

/// One uniform `[-1, 1]` template image per class, fixed by `seed`.
pub fn synthetic_templates(seed: u64, shape: SyntheticShape) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.classes)
        .map(|_| (0..shape.pixels()).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// `count` samples of template plus `N(0, noise²)` pixel noise, clipped to
/// `[-1, 1]`. Labels cycle through the classes in a seeded order. The split
/// selects an independent noise stream over the same templates. `count`
/// must be positive.
pub fn gen_synthetic(seed: u64, count: usize, shape: SyntheticShape, noise: f64, split: Split) -> Dataset {
    let templates = synthetic_templates(seed, shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Eval => 2,
    });
    let mut labels: Vec<usize> = (0..count).map(|i| i % shape.classes).collect();
    labels.shuffle(&mut rng);
    let dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise level");
    let mut data = Vec::with_capacity(count * shape.pixels());
    for &label in &labels {
        for &t in &templates[label] {
            let n = if noise > 0.0 { dist.sample(&mut rng) } else { 0.0 };
            data.push((t + n).clamp(-1.0, 1.0));
        }
    }
    Dataset {
        images: Tensor::new(vec![count, shape.channels, shape.size, shape.size], data)
            .expect("count must be positive"),
        labels,
        num_classes: shape.classes,
        split,
    }
}

/// Accuracy of assigning every sample to the closest template (L2).
pub fn nearest_template_accuracy(ds: &Dataset, templates: &[Vec<f64>]) -> f64 {
    let per = ds.image_len();
    let correct = ds
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let img = &ds.images.data()[i * per..(i + 1) * per];
            let dist = |t: &Vec<f64>| img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..templates.len())
                .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
                .unwrap_or(0);
            best == label
        })
        .count();
    correct as f64 / ds.len().max(1) as f64
}

fn truncated(file: &str, got: usize, need: usize) -> DataError {
    DataError::Truncated {
        file: file.to_string(),
        got,
        need,
    }
}

fn read_header(bytes: &[u8], file: &str, magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(truncated(file, bytes.len(), need));
    }
    let mut cur = Cursor::new(bytes);
    let found = cur.read_u32::<BigEndian>().expect("length checked");
    if found != magic {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            found,
            expected: magic,
        });
    }
    Ok((0..dims)
        .map(|_| cur.read_u32::<BigEndian>().expect("length checked") as usize)
        .collect())
}

/// Parse an IDX image/label pair already in memory. Pixels map to
/// `(p / 255 - 0.5) / 0.5`; images get a single channel.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let dims = read_header(images, "images", IDX_IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let need = 16 + count * rows * cols;
    if images.len() < need {
        return Err(truncated("images", images.len(), need));
    }
    let label_count = read_header(labels, "labels", IDX_LABELS_MAGIC, 1)?[0];
    if labels.len() < 8 + label_count {
        return Err(truncated("labels", labels.len(), 8 + label_count));
    }
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid("IDX file holds no pixels".into()));
    }
    let pixels = images[16..need]
        .iter()
        .map(|&p| (p as f64 / 255.0 - 0.5) / 0.5)
        .collect();
    let labels: Vec<usize> = labels[8..8 + count].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        images: Tensor::new(vec![count, 1, rows, cols], pixels).expect("sized above"),
        labels,
        num_classes,
        split,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    parse_idx(&read_file(images)?, &read_file(labels)?, split)
}

/// Encode a single-channel dataset as an IDX pair. Pixels are mapped back
/// with `round((v · 0.5 + 0.5) · 255)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(DataError::Invalid(format!("IDX holds one channel, dataset has {}", s[1])));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(DataError::LabelOutOfRange { label: l, classes: 256 });
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
    for d in [ds.len(), s[2], s[3]] {
        img.write_u32::<BigEndian>(d as u32).unwrap();
    }
    img.extend(
        ds.images
            .data()
            .iter()
            .map(|v| ((v * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
    lbl.write_u32::<BigEndian>(ds.len() as u32).unwrap();
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lbl))
}

pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let (img, lbl) = encode_idx(ds)?;
    for (path, bytes) in [(images, img), (labels, lbl)] {
        std::fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Template task shaped to the model input.
    Synthetic {
        seed: u64,
        train_count: usize,
        eval_count: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// IDX files; the model must take single-channel input of their size.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

fn default_noise() -> f64 {
    DEFAULT_NOISE
}

impl DatasetSpec {
    /// Load `split`, shaped for a model with `channels × size × size` input
    /// and `classes` outputs.
    pub fn load(&self, split: Split, channels: usize, size: usize, classes: usize) -> Result<Dataset, DataError> {
        let ds = match self {
            DatasetSpec::Synthetic {
                seed,
                train_count,
                eval_count,
                noise,
            } => {
                let count = match split {
                    Split::Train => *train_count,
                    Split::Eval => *eval_count,
                };
                if count == 0 {
                    return Err(DataError::Invalid("synthetic split needs at least one sample".into()));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(DataError::Invalid(format!("noise level {noise} must be finite and non-negative")));
                }
                let shape = SyntheticShape {
                    classes,
                    channels,
                    size,
                };
                gen_synthetic(*seed, count, shape, *noise, split)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
            } => {
                let (i, l) = match split {
                    Split::Train => (train_images, train_labels),
                    Split::Eval => (eval_images, eval_labels),
                };
                let mut ds = load_idx(i, l, split)?;
                ds.num_classes = classes;
                ds
            }
        };
        let expected = [channels, size, size];
        if ds.image_shape() != expected {
            return Err(DataError::ShapeMismatch {
                expected: expected.to_vec(),
                got: ds.image_shape().to_vec(),
            });
        }
        ds.check()?;
        Ok(ds)
    }
}

/// Index order of one pass: a seeded permutation, or `0..len`.
pub fn batch_order(len: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

/// One pass over `ds` in batches of `batch_size`; the last batch may be
/// short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
    assert!(batch_size > 0, "batch size must be positive");
    Batches {
        ds,
        order: batch_order(ds.len(), seed, shuffle),
        batch_size,
        pos: 0,
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}
