//! MNIST IDX files: a big-endian magic word, big-endian `u32` extents, then raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetSplit, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let word = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("file ends inside the {what} field")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.err(
                self.bytes.len(),
                format!("payload truncated: {available} of {len} bytes present"),
            ));
        }
        if available > len {
            return Err(self.err(self.pos + len, format!("{} trailing bytes", available - len)));
        }
        Ok(&self.bytes[self.pos..])
    }
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx_bytes(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
    split: Split,
) -> Result<DatasetSplit> {
    let mut im = IdxReader {
        bytes: images,
        path: images_path,
        pos: 0,
    };
    let magic = im.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(im.err(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = im.u32("image count")? as usize;
    let rows = im.u32("row count")? as usize;
    let cols = im.u32("column count")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(im.err(4, format!("degenerate dimensions {count}x{rows}x{cols}")));
    }
    let total = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| im.err(4, "dimensions overflow"))?;
    let pixels = im.payload(total)?;

    let mut lb = IdxReader {
        bytes: labels,
        path: labels_path,
        pos: 0,
    };
    let magic = lb.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lb.err(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = lb.u32("label count")? as usize;
    if label_count != count {
        return Err(lb.err(4, format!("{label_count} labels for {count} images")));
    }
    let label_bytes = lb.payload(count)?;

    let plane = rows * cols;
    let images = pixels
        .chunks_exact(plane)
        .zip(label_bytes)
        .enumerate()
        .map(|(i, (px, &label))| {
            if label > 9 {
                return Err(lb.err(8 + i, format!("label {label} > 9")));
            }
            Ok(LabeledImage {
                label: label as usize,
                pixels: Tensor::new(&[1, rows, cols], px.iter().map(|&b| b as f32 / 255.0).collect())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        images,
        split,
        num_classes: 10,
    })
}

/// Reads an MNIST image/label file pair; grayscale becomes a single channel.
pub fn parse_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<DatasetSplit> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx_bytes(&images, images_path, &labels, labels_path, split)
}

/// Writes single-channel images as an IDX pair.
pub fn write_mnist_idx(images_path: &Path, labels_path: &Path, images: &[LabeledImage]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("write_mnist_idx", "no images"))?;
    let (rows, cols) = (first.height(), first.width());
    let mut im = Vec::new();
    im.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        im.extend((v as u32).to_be_bytes());
    }
    let mut lb = Vec::new();
    lb.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend((images.len() as u32).to_be_bytes());
    for image in images {
        if image.pixels.shape() != [1, rows, cols] {
            return Err(Error::invalid("write_mnist_idx", "images must share one 1xHxW shape"));
        }
        im.extend(image.pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        lb.push(image.label as u8);
    }
    fs::File::create(images_path)?.write_all(&im)?;
    fs::File::create(labels_path)?.write_all(&lb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(pixels: &[u8], label: u8) -> (Vec<u8>, Vec<u8>) {
        let mut im = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        im.extend(1u32.to_be_bytes());
        im.extend(2u32.to_be_bytes());
        im.extend(2u32.to_be_bytes());
        im.extend_from_slice(pixels);
        let mut lb = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lb.extend(1u32.to_be_bytes());
        lb.push(label);
        (im, lb)
    }

    #[test]
    fn handmade_single_image() {
        let (im, lb) = pair(&[0, 51, 255, 102], 7);
        let split = parse_idx_bytes(&im, Path::new("i"), &lb, Path::new("l"), Split::Test).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.images[0].label, 7);
        assert_eq!(split.images[0].pixels.shape(), &[1, 2, 2]);
        assert_eq!(split.images[0].pixels.data(), &[0.0, 0.2, 1.0, 0.4]);
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let (im, lb) = pair(&[0; 4], 1);
        let err = parse_idx_bytes(&lb, Path::new("l"), &im, Path::new("i"), Split::Train).unwrap_err();
        match err {
            Error::Parse { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_between_files() {
        let (im, mut lb) = pair(&[0; 4], 1);
        lb[7] = 2;
        lb.push(3);
        assert!(parse_idx_bytes(&im, Path::new("i"), &lb, Path::new("l"), Split::Train).is_err());
    }

    #[test]
    fn truncated_payload() {
        let (im, lb) = pair(&[0; 4], 1);
        assert!(parse_idx_bytes(&im[..im.len() - 1], Path::new("i"), &lb, Path::new("l"), Split::Train).is_err());
        assert!(parse_idx_bytes(&im[..10], Path::new("i"), &lb, Path::new("l"), Split::Train).is_err());
    }
}
