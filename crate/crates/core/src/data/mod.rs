//! Dataset parsers, augmentation, normalization and raster IO.

mod augment;
mod cifar;
mod idx;
mod raster;
pub mod synthetic;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, crop, flip_horizontal, reflect_pad, AUGMENT_PADDING};
pub use cifar::{
    load_cifar10_official, parse_cifar10, parse_cifar100, parse_cifar_bytes, write_cifar10, write_cifar100,
    CifarLayout, CIFAR10_BATCH_BYTES, CIFAR_PIXELS,
};
pub use idx::{parse_idx_bytes, parse_mnist_idx, write_mnist_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use raster::{read_image, read_ppm, write_image, write_ppm, RgbImage};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "SE_EXPLAIN_DATA_DIR";

/// One image with pixels in `[0, 1]`, shaped `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub label: usize,
    pub pixels: Tensor<f32>,
}

impl LabeledImage {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// The image as a batch of one, `(1, C, H, W)`.
    pub fn as_batch(&self) -> Tensor<f32> {
        self.pixels.clone().reshape(&[1, self.channels(), self.height(), self.width()]).expect("rank-3 image")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Vec<LabeledImage>,
    pub split: Split,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(C, H, W)` of the first image.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|im| [im.channels(), im.height(), im.width()])
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for im in &self.images {
            hist[im.label] += 1;
        }
        hist
    }

    /// Stacks the selected images into one `(N, C, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let pixels: Vec<Tensor<f32>> = indices.iter().map(|&i| self.images[i].pixels.clone()).collect();
        let labels = indices.iter().map(|&i| self.images[i].label).collect();
        Ok((Tensor::stack(&pixels)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Mnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Mnist => "mnist",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (DatasetKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (DatasetKind::Cifar100, Split::Train) => vec!["train.bin"],
            (DatasetKind::Cifar100, Split::Test) => vec!["test.bin"],
            (DatasetKind::Mnist, Split::Train) => vec!["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
            (DatasetKind::Mnist, Split::Test) => vec!["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
        }
    }

    /// Sub-directory name used by the official archives.
    fn archive_dir(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
            DatasetKind::Mnist => "mnist",
        }
    }

    /// Resolves the directory holding this dataset's files: `dir` itself or
    /// the archive's usual sub-directory inside it.
    pub fn resolve_dir(self, dir: &Path) -> Result<PathBuf> {
        let first = self.files(Split::Test)[0];
        for candidate in [dir.to_path_buf(), dir.join(self.archive_dir())] {
            if candidate.join(first).is_file() {
                return Ok(candidate);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {} files ({first}) under {}", self.name(), dir.display()),
        )))
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            "mnist" => Ok(DatasetKind::Mnist),
            other => Err(format!("unknown dataset {other:?} (expected cifar10, cifar100 or mnist)")),
        }
    }
}

/// Loads one split of a dataset from `dir` (see [`DatasetKind::resolve_dir`]).
pub fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<DatasetSplit> {
    let root = kind.resolve_dir(dir)?;
    let paths: Vec<PathBuf> = kind.files(split).into_iter().map(|f| root.join(f)).collect();
    match kind {
        DatasetKind::Cifar10 => parse_cifar10(&paths, split),
        DatasetKind::Cifar100 => parse_cifar100(&paths, split),
        DatasetKind::Mnist => parse_mnist_idx(&paths[0], &paths[1], split),
    }
}

/// Per-channel affine normalization applied before the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel pixel mean and population standard deviation of a split.
    pub fn from_split(split: &DatasetSplit) -> Result<Self> {
        let [c, h, w] = split
            .image_shape()
            .ok_or_else(|| Error::EmptyDataset("cannot compute channel statistics".into()))?;
        let mut sum = vec![0.0f64; c];
        let mut sum_sq = vec![0.0f64; c];
        for im in &split.images {
            for (ch, plane) in im.pixels.data().chunks(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sum_sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (split.len() * h * w) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / count - m * m).max(0.0);
                if var > 1e-12 { var.sqrt() as f32 } else { 1.0 }
            })
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    fn check(&self, op: &'static str, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::shape(op, "channels", self.mean.len(), channels));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(op, "standard deviation must be positive"));
        }
        Ok(())
    }
}

/// `(x - mean) / std` per channel of a `(C, H, W)` image or `(N, C, H, W)` batch.
pub fn normalize(image: &Tensor<f32>, norm: &Normalization) -> Result<Tensor<f32>> {
    apply_per_channel(image, norm, "normalize", |v, m, s| (v - m) / s)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &Tensor<f32>, norm: &Normalization) -> Result<Tensor<f32>> {
    apply_per_channel(image, norm, "denormalize", |v, m, s| v * s + m)
}

fn apply_per_channel(
    image: &Tensor<f32>,
    norm: &Normalization,
    op: &'static str,
    f: impl Fn(f32, f32, f32) -> f32,
) -> Result<Tensor<f32>> {
    let shape = image.shape();
    let (c, hw) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        4 => (shape[1], shape[2] * shape[3]),
        r => return Err(Error::shape(op, "rank", 4, r)),
    };
    norm.check(op, c)?;
    let mut out = image.clone();
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        plane.iter_mut().for_each(|v| *v = f(*v, m, s));
    }
    Ok(out)
}
