//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes: the red,
//! green and blue planes of a 32x32 image, each in row-major order. CIFAR-100
//! records carry a coarse and a fine label byte before the pixels; only the
//! fine label is kept.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DatasetSplit, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Size of one official CIFAR-10 batch file (10 000 records).
pub const CIFAR10_BATCH_BYTES: u64 = 30_730_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    /// Label bytes preceding the pixels of each record.
    pub label_bytes: usize,
    /// Which of those bytes is the class id.
    pub label_index: usize,
    pub num_classes: usize,
}

impl CifarLayout {
    pub const CIFAR10: CifarLayout = CifarLayout {
        label_bytes: 1,
        label_index: 0,
        num_classes: 10,
    };

    pub const CIFAR100: CifarLayout = CifarLayout {
        label_bytes: 2,
        label_index: 1,
        num_classes: 100,
    };

    pub fn record_bytes(&self) -> usize {
        self.label_bytes + CIFAR_PIXELS
    }
}

/// Parses an in-memory batch; `path` is only used in error messages.
pub fn parse_cifar_bytes(bytes: &[u8], path: &Path, layout: CifarLayout) -> Result<Vec<LabeledImage>> {
    let record = layout.record_bytes();
    let parse_err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.is_empty() {
        return Err(parse_err(0, "empty file".into()));
    }
    if bytes.len() % record != 0 {
        let whole = bytes.len() / record;
        return Err(parse_err(
            whole * record,
            format!(
                "truncated record {whole}: {} of {record} bytes present",
                bytes.len() % record
            ),
        ));
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[layout.label_index] as usize;
            if label >= layout.num_classes {
                return Err(parse_err(
                    i * record + layout.label_index,
                    format!("record {i}: label {label} >= {}", layout.num_classes),
                ));
            }
            let pixels = chunk[layout.label_bytes..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                label,
                pixels: Tensor::new(&[3, 32, 32], pixels)?,
            })
        })
        .collect()
}

fn parse_files(paths: &[PathBuf], split: Split, layout: CifarLayout) -> Result<DatasetSplit> {
    let mut images = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        images.extend(parse_cifar_bytes(&bytes, path, layout)?);
    }
    Ok(DatasetSplit {
        images,
        split,
        num_classes: layout.num_classes,
    })
}

/// Parses and concatenates CIFAR-10 batch files. Any whole number of records is accepted.
pub fn parse_cifar10(paths: &[PathBuf], split: Split) -> Result<DatasetSplit> {
    parse_files(paths, split, CifarLayout::CIFAR10)
}

pub fn parse_cifar100(paths: &[PathBuf], split: Split) -> Result<DatasetSplit> {
    parse_files(paths, split, CifarLayout::CIFAR100)
}

/// Loads the official CIFAR-10 distribution, insisting that every batch file
/// has exactly [`CIFAR10_BATCH_BYTES`] bytes. Returns `(train, test)`.
pub fn load_cifar10_official(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let root = super::DatasetKind::Cifar10.resolve_dir(dir)?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Test] {
        let paths: Vec<PathBuf> = super::DatasetKind::Cifar10
            .files(split)
            .into_iter()
            .map(|f| root.join(f))
            .collect();
        for path in &paths {
            let len = fs::metadata(path)?.len();
            if len != CIFAR10_BATCH_BYTES {
                return Err(Error::Parse {
                    path: path.clone(),
                    offset: len.min(CIFAR10_BATCH_BYTES),
                    message: format!("batch file has {len} bytes, expected {CIFAR10_BATCH_BYTES}"),
                });
            }
        }
        out.push(parse_cifar10(&paths, split)?);
    }
    let test = out.pop().expect("test split");
    let train = out.pop().expect("train split");
    Ok((train, test))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_records(path: &Path, images: &[LabeledImage], layout: CifarLayout) -> Result<()> {
    let mut out = Vec::with_capacity(images.len() * layout.record_bytes());
    for im in images {
        if im.pixels.shape() != [3, 32, 32] {
            return Err(Error::invalid("write_cifar", "images must be 3x32x32"));
        }
        if im.label >= layout.num_classes {
            return Err(Error::invalid("write_cifar", format!("label {} out of range", im.label)));
        }
        let mut labels = vec![0u8; layout.label_bytes];
        labels[layout.label_index] = im.label as u8;
        out.extend_from_slice(&labels);
        out.extend(im.pixels.data().iter().map(|&v| to_byte(v)));
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Writes images in the CIFAR-10 record format (pixels quantized to bytes).
pub fn write_cifar10(path: &Path, images: &[LabeledImage]) -> Result<()> {
    write_records(path, images, CifarLayout::CIFAR10)
}

/// Writes images in the CIFAR-100 record format; the coarse label byte is zero.
pub fn write_cifar100(path: &Path, images: &[LabeledImage]) -> Result<()> {
    write_records(path, images, CifarLayout::CIFAR100)
}
