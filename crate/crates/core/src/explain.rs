//! Saliency maps from SE vectors and Grad-CAM, bicubic upsampling and colormap overlays.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::se::{select_top_channels, ChannelSelection};
use crate::tensor::{Scalar, Tensor};

/// Cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Row-major `height x width` grid of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("grid", "values", height * width, values.len()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Se,
    GradCam,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Se => "se",
            Method::GradCam => "gradcam",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Method::Se),
            "gradcam" => Ok(Method::GradCam),
            "random" => Ok(Method::Random),
            other => Err(Error::invalid("method", format!("unknown method {other:?} (se, gradcam, random)"))),
        }
    }
}

/// Per-pixel importance in `[0, 1]` at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Grid,
    pub method: Method,
}

impl SaliencyMap {
    /// Normalizes `raw` into a map.
    pub fn from_raw(raw: Grid, method: Method) -> Self {
        Self {
            values: normalize_min_max(raw),
            method,
        }
    }

    pub fn height(&self) -> usize {
        self.values.height
    }

    pub fn width(&self) -> usize {
        self.values.width
    }

    /// Colormapped map without blending.
    pub fn to_rgb(&self) -> RgbImage {
        let data = self
            .values
            .values
            .iter()
            .flat_map(|&v| colormap(v).map(|c| c.round() as u8))
            .collect();
        RgbImage::new(self.width(), self.height(), data).expect("grid dimensions")
    }

    /// One CSV row per image row, values printed with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.values.chunks(self.width()) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate along one axis.
fn axis_taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let idx = std::array::from_fn(|k| (base - 1 + k as isize).clamp(0, input as isize - 1) as usize);
            let w = [
                cubic_kernel(t + 1.0, CUBIC_A),
                cubic_kernel(t, CUBIC_A),
                cubic_kernel(1.0 - t, CUBIC_A),
                cubic_kernel(2.0 - t, CUBIC_A),
            ];
            (idx, w)
        })
        .collect()
}

/// Separable cubic-convolution resampling with half-pixel alignment and
/// clamped edges.
pub fn bicubic_upsample(grid: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_upsample", "output extent must be at least 1"));
    }
    if grid.height < 2 || grid.width < 2 {
        return Err(Error::invalid(
            "bicubic_upsample",
            format!("input must be at least 2x2, got {}x{}", grid.height, grid.width),
        ));
    }
    let rows = axis_taps(grid.height, out_h);
    let cols = axis_taps(grid.width, out_w);
    // horizontal pass: (h, out_w)
    let mut tmp = vec![0.0; grid.height * out_w];
    for y in 0..grid.height {
        let src = &grid.values[y * grid.width..(y + 1) * grid.width];
        for (x, (idx, w)) in cols.iter().enumerate() {
            tmp[y * out_w + x] = (0..4).map(|k| w[k] * src[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, (idx, w)) in rows.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = (0..4).map(|k| w[k] * tmp[idx[k] * out_w + x]).sum();
        }
    }
    Grid::new(out_h, out_w, out)
}

/// Maps the range of `grid` onto `[0, 1]`; a flat grid becomes 0.5 everywhere.
pub fn normalize_min_max(mut grid: Grid) -> Grid {
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    // bicubic resampling of a constant leaves rounding-level ripple
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        grid.values.fill(0.5);
    } else {
        for v in &mut grid.values {
            *v = ((*v - lo) / range).clamp(0.0, 1.0);
        }
    }
    grid
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, "rank", 3, t.rank())),
    }
}

/// s-weighted mean of the selected channels of a `(C, h, w)` feature map,
/// upsampled to the image and normalized.
pub fn se_heatmap<T: Scalar>(
    captured: &Tensor<T>,
    s: &[T],
    selection: &ChannelSelection,
    img_h: usize,
    img_w: usize,
) -> Result<SaliencyMap> {
    let (c, h, w) = dims3("se_heatmap", captured)?;
    if s.len() != c {
        return Err(Error::shape("se_heatmap", "channels", c, s.len()));
    }
    assert!(!selection.indices.is_empty(), "channel selection is never empty");
    let plane = h * w;
    let data = captured.data();
    let mut raw = vec![0.0; plane];
    let mut total = 0.0;
    for &ch in &selection.indices {
        if ch >= c {
            return Err(Error::invalid("se_heatmap", format!("channel {ch} outside {c} channels")));
        }
        let weight = s[ch].as_f64();
        total += weight;
        for (r, v) in raw.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
            *r += weight * v.as_f64();
        }
    }
    raw.iter_mut().for_each(|v| *v /= total);
    let up = bicubic_upsample(&Grid::new(h, w, raw)?, img_h, img_w)?;
    Ok(SaliencyMap::from_raw(up, Method::Se))
}

/// SE explanation of one `(C, H, W)` image: forward, select the top
/// `fraction` of channels, combine.
pub fn se_saliency<T: Scalar>(model: &ModelGraph<T>, image: &Tensor<T>, fraction: f64) -> Result<(SaliencyMap, ChannelSelection)> {
    if !model.se_enabled() {
        return Err(Error::NoSeBlock);
    }
    let batch = as_batch(image)?;
    let out = model.forward(&batch)?;
    let vector = &out.se.expect("SE model records vectors")[0];
    let selection = select_top_channels(&vector.s, fraction)?;
    let [_, h, w] = model.input_shape;
    let (c, fh, fw) = dims3("se_saliency", &out.captured)?;
    let captured = out.captured.reshape(&[c, fh, fw])?;
    let map = se_heatmap(&captured, &vector.s, &selection, h, w)?;
    Ok((map, selection))
}

fn as_batch<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    match image.rank() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]]),
        4 if image.shape()[0] == 1 => Ok(image.clone()),
        _ => Err(Error::shape("explain", "rank", 3, image.rank())),
    }
}

/// Intermediate Grad-CAM quantities for one image.
#[derive(Clone, Debug)]
pub struct GradCamParts<T = f32> {
    pub target: usize,
    /// Captured activations `A`, `(C, h, w)`.
    pub activations: Tensor<T>,
    /// `d logit_target / dA`, `(C, h, w)`.
    pub gradients: Tensor<T>,
    /// Spatial mean of the gradient per channel.
    pub alpha: Vec<f64>,
}

/// Backpropagates the target logit (argmax when `class` is `None`) to the
/// captured feature map.
pub fn gradcam_parts<T: Scalar>(model: &ModelGraph<T>, image: &Tensor<T>, class: Option<usize>) -> Result<GradCamParts<T>> {
    let batch = as_batch(image)?;
    let trace = model.forward_trace(&batch)?;
    let logits = trace.logits.data();
    let target = match class {
        Some(k) if k >= model.num_classes => {
            return Err(Error::invalid(
                "gradcam",
                format!("class {k} outside {} classes", model.num_classes),
            ))
        }
        Some(k) => k,
        None => argmax(logits),
    };
    let mut onehot = Tensor::zeros(&[1, model.num_classes]);
    onehot.data_mut()[target] = T::one();
    let grads = model.backward(&trace, &onehot)?;
    let capture = model.capture_index()?;
    let (c, h, w) = dims3("gradcam", &trace.inputs[capture])?;
    let activations = trace.inputs[capture].clone().reshape(&[c, h, w])?;
    let gradients = grads.captured.reshape(&[c, h, w])?;
    let alpha = gradients
        .data()
        .chunks(h * w)
        .map(|g| g.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect();
    Ok(GradCamParts {
        target,
        activations,
        gradients,
        alpha,
    })
}

/// Grad-CAM map `relu(sum_k alpha_k A_k)` at image resolution.
pub fn gradcam<T: Scalar>(model: &ModelGraph<T>, image: &Tensor<T>, class: Option<usize>) -> Result<(SaliencyMap, usize)> {
    let parts = gradcam_parts(model, image, class)?;
    let (_, h, w) = dims3("gradcam", &parts.activations)?;
    let mut raw = vec![0.0; h * w];
    for (a, plane) in parts.alpha.iter().zip(parts.activations.data().chunks(h * w)) {
        for (r, v) in raw.iter_mut().zip(plane) {
            *r += a * v.as_f64();
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let [_, ih, iw] = model.input_shape;
    let up = bicubic_upsample(&Grid::new(h, w, raw)?, ih, iw)?;
    Ok((SaliencyMap::from_raw(up, Method::GradCam), parts.target))
}

/// Uniform noise map fully determined by `seed`.
pub fn random_saliency(height: usize, width: usize, seed: u64) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width).map(|_| rng.random::<f64>()).collect();
    SaliencyMap::from_raw(Grid::new(height, width, values).expect("sized grid"), Method::Random)
}

/// Saliency of `method` for one image; `seed` only affects [`Method::Random`].
pub fn explain(model: &ModelGraph, image: &Tensor<f32>, method: Method, fraction: f64, seed: u64) -> Result<SaliencyMap> {
    match method {
        Method::Se => se_saliency(model, image, fraction).map(|(m, _)| m),
        Method::GradCam => gradcam(model, image, None).map(|(m, _)| m),
        Method::Random => {
            let [_, h, w] = model.input_shape;
            Ok(random_saliency(h, w, seed))
        }
    }
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Piecewise-linear blue, cyan, green, yellow, red ramp over `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let pos = v * 4.0;
    let seg = (pos.floor() as usize).min(3);
    let t = pos - seg as f64;
    let (a, b) = (RAMP[seg], RAMP[seg + 1]);
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// `(1 - alpha) * image + alpha * colormap(saliency)`, rounded and clamped.
pub fn overlay(image: &RgbImage, saliency: &SaliencyMap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("overlay", format!("alpha {alpha} outside [0, 1]")));
    }
    if image.height != saliency.height() {
        return Err(Error::shape("overlay", "height", image.height, saliency.height()));
    }
    if image.width != saliency.width() {
        return Err(Error::shape("overlay", "width", image.width, saliency.width()));
    }
    let data = image
        .data
        .chunks_exact(3)
        .zip(&saliency.values.values)
        .flat_map(|(px, &s)| {
            let c = colormap(s);
            std::array::from_fn::<u8, 3, _>(|i| {
                ((1.0 - alpha) * px[i] as f64 + alpha * c[i]).round().clamp(0.0, 255.0) as u8
            })
        })
        .collect();
    RgbImage::new(image.width, image.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selection(indices: Vec<usize>) -> ChannelSelection {
        ChannelSelection {
            indices,
            threshold: 0.0,
            mu: 0.0,
            sigma: 0.0,
            fallback_used: false,
        }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0, CUBIC_A), 1.0);
        assert_eq!(cubic_kernel(1.0, CUBIC_A), 0.0);
        assert_eq!(cubic_kernel(2.0, CUBIC_A), 0.0);
        assert!((cubic_kernel(0.5, CUBIC_A) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5, CUBIC_A) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn unit_scale_is_identity() {
        let g = Grid::new(3, 4, (0..12).map(|v| (v * v) as f64 * 0.37).collect()).unwrap();
        assert_eq!(bicubic_upsample(&g, 3, 4).unwrap(), g);
    }

    #[test]
    fn constant_stays_constant() {
        let g = Grid::new(4, 4, vec![2.5; 16]).unwrap();
        for v in bicubic_upsample(&g, 13, 7).unwrap().values {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_tiny_inputs_and_empty_outputs() {
        let g = Grid::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(bicubic_upsample(&g, 4, 4).is_err());
        let g = Grid::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(bicubic_upsample(&g, 0, 4).is_err());
    }

    #[test]
    fn flat_map_normalizes_to_half() {
        let n = normalize_min_max(Grid::new(2, 2, vec![3.0; 4]).unwrap());
        assert_eq!(n.values, vec![0.5; 4]);
        let n = normalize_min_max(Grid::new(1, 3, vec![1.0, 2.0, 5.0]).unwrap());
        assert_eq!(n.values, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn single_constant_channel_is_flat() {
        let cap = Tensor::<f32>::full(&[2, 4, 4], 3.0);
        let m = se_heatmap(&cap, &[0.9, 0.1], &selection(vec![0]), 8, 8).unwrap();
        assert!(m.values.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hot_pixel_peaks_at_one() {
        let mut cap = Tensor::<f32>::zeros(&[1, 4, 4]);
        cap.data_mut()[5] = 1.0;
        let m = se_heatmap(&cap, &[0.7], &selection(vec![0]), 16, 16).unwrap();
        let max = m.values.values.iter().cloned().fold(f64::MIN, f64::max);
        let min = m.values.values.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
        let peak = m.values.argmax();
        assert_eq!((peak / 16 / 4, peak % 16 / 4), (1, 1));
    }

    #[test]
    fn selection_outside_channels_is_rejected() {
        let cap = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(se_heatmap(&cap, &[0.5, 0.5], &selection(vec![2]), 4, 4).is_err());
    }

    #[test]
    fn ramp_anchors() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(0.25), [0.0, 255.0, 255.0]);
        assert_eq!(colormap(0.5), [0.0, 255.0, 0.0]);
        assert_eq!(colormap(0.75), [255.0, 255.0, 0.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(colormap(0.125), [0.0, 127.5, 255.0]);
    }

    #[test]
    fn overlay_rules() {
        let img = RgbImage::new(2, 1, vec![10, 20, 30, 200, 100, 50]).unwrap();
        let flat = |v: f64| SaliencyMap {
            values: Grid::new(1, 2, vec![v; 2]).unwrap(),
            method: Method::Se,
        };
        assert_eq!(overlay(&img, &flat(0.3), 0.0).unwrap(), img);
        assert_eq!(overlay(&img, &flat(1.0), 1.0).unwrap().data, vec![255, 0, 0, 255, 0, 0]);
        assert_eq!(overlay(&img, &flat(0.5), 0.5).unwrap().data, vec![5, 138, 15, 100, 178, 25]);
        assert!(overlay(&img, &flat(0.5), 1.5).is_err());
        let tall = SaliencyMap {
            values: Grid::new(2, 1, vec![0.0; 2]).unwrap(),
            method: Method::Se,
        };
        assert!(matches!(overlay(&img, &tall, 0.5), Err(Error::Shape { axis: "height", .. })));
    }

    #[test]
    fn random_maps_follow_the_seed() {
        assert_eq!(random_saliency(8, 8, 1), random_saliency(8, 8, 1));
        assert_ne!(random_saliency(8, 8, 1), random_saliency(8, 8, 2));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Se, Method::GradCam, Method::Random] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lime".parse::<Method>().is_err());
    }
}
