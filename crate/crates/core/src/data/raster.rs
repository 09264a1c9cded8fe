//! 8-bit RGB rasters with binary PPM (P6) and PNG encoding.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("rgb_image", "data length", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    /// Quantizes a `(3, H, W)` or `(1, H, W)` tensor with values in `[0, 1]`.
    pub fn from_tensor(pixels: &Tensor<f32>) -> Result<Self> {
        let [c, h, w] = pixels.shape()[..] else {
            return Err(Error::shape("rgb_image", "rank", 3, pixels.rank()));
        };
        if c != 3 && c != 1 {
            return Err(Error::shape("rgb_image", "channels", 3, c));
        }
        let plane = h * w;
        let d = pixels.data();
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for ch in 0..3 {
                let v = d[(ch % c) * plane + i];
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Self::new(w, h, data)
    }

    /// `(3, H, W)` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = px[ch] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("non-empty raster")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    fs::write(path, image.to_ppm())?;
    Ok(())
}

/// Reads a binary PPM with maxval 255; `#` comments in the header are skipped.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes, path)
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err(start, "non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(err(0, "not a binary PPM (P6)"));
    }
    let parse = |i: usize| fields[i].parse::<usize>().map_err(|_| err(0, "bad header number"));
    let (width, height, maxval) = (parse(1)?, parse(2)?, parse(3)?);
    if maxval != 255 {
        return Err(err(0, "only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(err(0, "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| err(0, "image dimensions overflow"))?;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| err(bytes.len(), "truncated PPM raster"))?;
    RgbImage::new(width, height, raster.to_vec())
}

fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::invalid("write_png", e.to_string()))?;
    writer
        .write_image_data(&image.data)
        .map_err(|e| Error::invalid("write_png", e.to_string()))?;
    writer.finish().map_err(|e| Error::invalid("write_png", e.to_string()))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        message,
    };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| parse_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| parse_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| parse_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(parse_err("palette was not expanded".into())),
    };
    RgbImage::new(w, h, data)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes PNG for a `.png` extension and binary PPM otherwise.
pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    if is_png(path) {
        write_png(path, image)
    } else {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&image.to_ppm())?;
        Ok(())
    }
}

/// Reads PNG for a `.png` extension and binary PPM otherwise.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    if is_png(path) {
        read_png(path)
    } else {
        read_ppm(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let im = RgbImage::new(2, 1, vec![255, 0, 0, 1, 2, 3]).unwrap();
        let bytes = im.to_ppm();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(parse_ppm(&bytes, Path::new("x")).unwrap(), im);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6 # made by hand\n1 1 255\n".to_vec();
        bytes.extend([9, 8, 7]);
        assert_eq!(parse_ppm(&bytes, Path::new("x")).unwrap().data, vec![9, 8, 7]);
    }

    #[test]
    fn malformed_ppm_is_an_error() {
        assert!(parse_ppm(b"P5\n1 1\n255\n\0", Path::new("x")).is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\0\0", Path::new("x")).is_err());
        assert!(parse_ppm(b"P6\n2", Path::new("x")).is_err());
        assert!(parse_ppm(b"P6\n99999999999 99999999999\n255\n", Path::new("x")).is_err());
    }

    #[test]
    fn tensor_round_trip_through_bytes() {
        let data: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let im = RgbImage::new(4, 4, data).unwrap();
        assert_eq!(RgbImage::from_tensor(&im.to_tensor()).unwrap(), im);
    }
}
