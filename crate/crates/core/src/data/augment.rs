use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflection padding added before the random crop.
pub const AUGMENT_PADDING: usize = 4;

fn dims3(op: &'static str, image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, "rank", 3, image.rank())),
    }
}

/// Mirrors a `(C, H, W)` image left to right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[image.rank() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Mirror padding that does not repeat the edge pixel (`-1 -> 1`).
pub fn reflect_pad(image: &Tensor<f32>, pad: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3("reflect_pad", image)?;
    if pad >= h || pad >= w {
        return Err(Error::invalid("reflect_pad", format!("padding {pad} needs extents above {pad}")));
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        r as usize
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut data = Vec::with_capacity(c * ph * pw);
    for plane in image.data().chunks(h * w) {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                data.push(plane[sy * w + reflect(x as isize - pad as isize, w)]);
            }
        }
    }
    Tensor::new(&[c, ph, pw], data)
}

/// The `h x w` window whose top-left corner is `(top, left)`.
pub fn crop(image: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = dims3("crop", image)?;
    if top + h > ih || left + w > iw || h == 0 || w == 0 {
        return Err(Error::invalid("crop", format!("window {h}x{w} at ({top}, {left}) outside {ih}x{iw}")));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(ih * iw) {
        for y in top..top + h {
            data.extend_from_slice(&plane[y * iw + left..y * iw + left + w]);
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Training-time augmentation: horizontal flip with probability 0.5, then a
/// random crop of the original size from the reflection-padded image.
pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (_, h, w) = dims3("augment", image)?;
    let flipped;
    let source = if rng.random_bool(0.5) {
        flipped = flip_horizontal(image);
        &flipped
    } else {
        image
    };
    if h <= AUGMENT_PADDING || w <= AUGMENT_PADDING {
        return Ok(source.clone());
    }
    let padded = reflect_pad(source, AUGMENT_PADDING)?;
    let top = rng.random_range(0..=2 * AUGMENT_PADDING);
    let left = rng.random_range(0..=2 * AUGMENT_PADDING);
    crop(&padded, top, left, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn mean(t: &Tensor<f32>) -> f64 {
        t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let im = random_image(&mut rng, 3, 5, 7);
        assert_ne!(flip_horizontal(&im), im);
        assert_eq!(flip_horizontal(&flip_horizontal(&im)), im);
    }

    #[test]
    fn centre_crop_of_padding_is_the_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let im = random_image(&mut rng, 3, 32, 32);
        let padded = reflect_pad(&im, 4).unwrap();
        assert_eq!(padded.shape(), &[3, 40, 40]);
        assert_eq!(crop(&padded, 4, 4, 32, 32).unwrap(), im);
    }

    #[test]
    fn reflection_skips_the_edge_pixel() {
        let im = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // height 1 cannot be reflected by 2
        assert!(reflect_pad(&im, 2).is_err());
        let im = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let p = reflect_pad(&im, 1).unwrap();
        assert_eq!(&p.data()[..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn flip_preserves_the_pixel_mean_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let im = random_image(&mut rng, 3, 8, 8);
        let mut a: Vec<f32> = im.data().to_vec();
        let mut b: Vec<f32> = flip_horizontal(&im).data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn padded_crop_roughly_preserves_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let im = random_image(&mut rng, 3, 32, 32);
            let out = augment(&im, &mut rng).unwrap();
            assert_eq!(out.shape(), im.shape());
            worst = worst.max((mean(&out) - mean(&im)).abs() / mean(&im));
        }
        assert!(worst < 0.05, "worst relative mean shift {worst}");
    }
}
