//! IDX parsing, MNIST loading, synthetic blobs and batch iteration.

use std::f64::consts::TAU;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const IDX_UBYTE: u8 = 0x08;

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 255 {
            return Err(Error::Format {
                offset: 3,
                msg: format!("rank {} not representable", dims.len()),
            });
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format {
                offset: 4,
                msg: "dimension exceeds u32".into(),
            });
        }
        let expected: usize = dims.iter().product();
        if expected != payload.len() {
            return Err(Error::Length {
                expected,
                actual: payload.len(),
            });
        }
        Ok(Self {
            dtype: IDX_UBYTE,
            dims,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&[0, 0, self.dtype, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Parses an IDX container. Only dtype `0x08` is supported.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            expected: 4,
            actual: bytes.len(),
        });
    }
    for (offset, &b) in bytes[..2].iter().enumerate() {
        if b != 0 {
            return Err(Error::Format {
                offset,
                msg: format!("magic byte {b:#04x}, expected 0x00"),
            });
        }
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Format {
            offset: 2,
            msg: format!("unsupported dtype {:#04x}", bytes[2]),
        });
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: 3,
            msg: "rank 0".into(),
        });
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Length {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: "dimensions overflow".into(),
        })?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxArray {
        dtype: IDX_UBYTE,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inputs `[n, ...]` with values in `[0, 1]` and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Consistency(format!("label {y} outside {n_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.inputs.rows(indices)?, labels, self.n_classes, split)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.inputs.rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// File names of the four MNIST IDX files inside a directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Where validation items come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSource {
    /// Prefix of the test file, shared with the test split.
    TestFile,
    /// Training-file items that follow the training prefix.
    TrainTail,
}

/// Prefix sizes of each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub val_source: ValSource,
}

impl SplitSpec {
    pub const FULL: SplitSpec = SplitSpec {
        train: 50_000,
        val: 10_000,
        test: 10_000,
        val_source: ValSource::TestFile,
    };

    pub const DESK: SplitSpec = SplitSpec {
        train: 5_000,
        val: 1_000,
        test: 1_000,
        val_source: ValSource::TestFile,
    };
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn images_and_labels(images: IdxArray, labels: IdxArray) -> Result<(Tensor, Vec<usize>)> {
    if images.dims.len() != 3 {
        return Err(Error::Consistency(format!(
            "image array has rank {}",
            images.dims.len()
        )));
    }
    if labels.dims.len() != 1 {
        return Err(Error::Consistency(format!(
            "label array has rank {}",
            labels.dims.len()
        )));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let shape = [images.dims[0], 1, images.dims[1], images.dims[2]];
    let data = images.payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels.payload.iter().map(|&b| b as usize).collect();
    Ok((Tensor::new(&shape, data)?, labels))
}

fn prefix(inputs: &Tensor, labels: &[usize], range: std::ops::Range<usize>, split: Split) -> Result<Dataset> {
    if range.end > labels.len() {
        return Err(Error::Consistency(format!(
            "{split} split needs items up to {} but the file holds {}",
            range.end,
            labels.len()
        )));
    }
    let idx: Vec<usize> = range.collect();
    Dataset::new(inputs.rows(&idx)?, idx.iter().map(|&i| labels[i]).collect(), 10, split)
}

/// Loads MNIST from `dir`, scaling pixels by `1/255` and taking deterministic prefixes.
pub fn load_mnist(dir: &Path, files: &MnistFiles, spec: &SplitSpec) -> Result<MnistSplits> {
    let path = |name: &str| -> PathBuf { dir.join(name) };
    let (train_x, train_y) = images_and_labels(
        read_idx(&path(&files.train_images))?,
        read_idx(&path(&files.train_labels))?,
    )?;
    let (test_x, test_y) = images_and_labels(
        read_idx(&path(&files.test_images))?,
        read_idx(&path(&files.test_labels))?,
    )?;
    if let Some(&y) = train_y.iter().chain(&test_y).find(|&&y| y >= 10) {
        return Err(Error::Consistency(format!("label {y} outside 10 classes")));
    }
    let train = prefix(&train_x, &train_y, 0..spec.train, Split::Train)?;
    let val = match spec.val_source {
        ValSource::TestFile => prefix(&test_x, &test_y, 0..spec.val, Split::Val)?,
        ValSource::TrainTail => prefix(&train_x, &train_y, spec.train..spec.train + spec.val, Split::Val)?,
    };
    let test = prefix(&test_x, &test_y, 0..spec.test, Split::Test)?;
    Ok(MnistSplits { train, val, test })
}

/// How [`synth_blobs`] lays out each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobLayout {
    /// `[2]` raw feature vector.
    Features,
    /// `[1, side, side]` image whose left half holds feature 0 and right half feature 1.
    Image { side: usize },
}

/// Gaussian blobs centred on a circle, one per class, with features rescaled into
/// `[0, 1]`. Class `k` sits at angle `2πk/K`.
pub fn synth_blobs(
    n_classes: usize,
    n_per_class: usize,
    noise_sigma: f64,
    seed: u64,
    layout: BlobLayout,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Config("synthetic blobs need at least two classes".into()));
    }
    if n_per_class == 0 || !(noise_sigma >= 0.0) {
        return Err(Error::Config(
            "synthetic blobs need samples and a non-negative noise".into(),
        ));
    }
    let mut rng = rng_from(seed);
    let n = n_classes * n_per_class;
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        let angle = TAU * k as f64 / n_classes as f64;
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let x = angle.cos() + noise_sigma * e0;
        let y = angle.sin() + noise_sigma * e1;
        // Map the unit circle (plus noise) into [0, 1] with clamping.
        feats.push([((x + 2.0) / 4.0).clamp(0.0, 1.0), ((y + 2.0) / 4.0).clamp(0.0, 1.0)]);
        labels.push(k);
    }
    let inputs = match layout {
        BlobLayout::Features => Tensor::new(&[n, 2], feats.iter().flatten().copied().collect())?,
        BlobLayout::Image { side } => {
            if side < 2 {
                return Err(Error::Config("blob images need side >= 2".into()));
            }
            let mut data = Vec::with_capacity(n * side * side);
            for f in &feats {
                for _ in 0..side {
                    for c in 0..side {
                        data.push(if c < side / 2 { f[0] } else { f[1] });
                    }
                }
            }
            Tensor::new(&[n, 1, side, side], data)?
        }
    };
    Dataset::new(inputs, labels, n_classes, Split::Train)
}

/// Batches of indices into a dataset of `n` items. With a seed the order is a
/// deterministic shuffle; without one it is sequential. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng_from(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized batches of `dataset`; see [`batch_indices`] for the ordering.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_> {
    let batches = batch_indices(dataset.len(), batch_size, shuffle_seed)?;
    Ok(batches.into_iter().map(move |idx| dataset.batch(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rank3() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(0..8u8);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, [2, 2, 2]);
        assert_eq!(a.payload, (0..8).collect::<Vec<u8>>());
        assert_eq!(a.to_bytes(), bytes);
    }

    #[test]
    fn fixture_labels() {
        let a = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9]).unwrap();
        assert_eq!(a.dims, [3]);
        assert_eq!(a.payload, [7, 2, 9]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2]).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Length {
                    expected: 11,
                    actual: 10
                }
            ),
            "{err}"
        );
        let err = parse_idx(&[0, 1, 8, 1, 0, 0, 0, 1, 7]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 1, .. }), "{err}");
        let err = parse_idx(&[0, 0, 0x0D, 1, 0, 0, 0, 1, 7]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 2, .. }), "{err}");
        assert!(matches!(
            parse_idx(&[0, 0, 8, 2, 0, 0]),
            Err(Error::Length { expected: 12, .. })
        ));
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(3, 10, 0.1, 4, BlobLayout::Features).unwrap();
        let b = synth_blobs(3, 10, 0.1, 4, BlobLayout::Features).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels[..4], [0, 1, 2, 0]);
        let img = synth_blobs(3, 2, 0.0, 4, BlobLayout::Image { side: 4 }).unwrap();
        assert_eq!(img.inputs.shape(), &[6, 1, 4, 4]);
        assert!(img.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = batch_indices(10, 4, Some(1)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 10, None).unwrap(), vec![(0..10).collect::<Vec<_>>()]);
        assert_eq!(
            batch_indices(10, 3, Some(5)).unwrap(),
            batch_indices(10, 3, Some(5)).unwrap()
        );
    }
}
