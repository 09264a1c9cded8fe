//! Deletion and insertion curves for saliency maps.
//!
//! Pixels are perturbed in descending saliency order while the probability of
//! the class predicted on the untouched image is tracked. Deletion overwrites
//! pixels with zero; insertion starts from a blurred copy and restores the
//! original pixels.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::explain::{argmax, explain, Grid, Method, SaliencyMap};
use crate::model::ModelGraph;
use crate::se::DEFAULT_TOP_FRACTION;
use crate::tensor::{softmax, Tensor};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BLUR_SIGMA: f64 = 5.0;
pub const DEFAULT_BLUR_RADIUS: usize = 10;

/// Anything that maps an `(N, C, H, W)` batch to `(N, K)` logits.
pub trait Classifier: Sync {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for ModelGraph {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward(batch)?.logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Deletion,
    Insertion,
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deletion" => Ok(CurveKind::Deletion),
            "insertion" => Ok(CurveKind::Insertion),
            other => Err(Error::invalid("curve", format!("unknown curve kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricCurve {
    pub kind: CurveKind,
    /// Fraction of pixels perturbed, from 0 to 1.
    pub fractions: Vec<f64>,
    /// Target-class probability after each step.
    pub probs: Vec<f64>,
    pub auc: f64,
    pub target: usize,
}

/// Perturbation settings shared by both curves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveConfig {
    pub steps: usize,
    pub blur_sigma: f64,
    pub blur_radius: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            blur_radius: DEFAULT_BLUR_RADIUS,
        }
    }
}

/// Trapezoidal area under `probs` over strictly increasing `fractions`.
pub fn auc(fractions: &[f64], probs: &[f64]) -> Result<f64> {
    if fractions.len() != probs.len() {
        return Err(Error::shape("auc", "curve length", fractions.len(), probs.len()));
    }
    if fractions.len() < 2 {
        return Err(Error::invalid("auc", "need at least two points"));
    }
    let mut area = 0.0;
    for i in 1..fractions.len() {
        let dx = fractions[i] - fractions[i - 1];
        if !(dx > 0.0) {
            return Err(Error::invalid("auc", format!("fractions not strictly increasing at index {i}")));
        }
        area += dx * (probs[i] + probs[i - 1]) / 2.0;
    }
    Ok(area)
}

/// Pixel indices by descending saliency; equal values keep row-major order.
pub fn pixel_order(saliency: &Grid) -> Vec<usize> {
    let v = &saliency.values;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order
}

/// Number of perturbed pixels after each step: `0, p, 2p, ...` capped at
/// `pixels`, with `p = ceil(pixels / steps)`.
pub fn step_counts(pixels: usize, steps: usize) -> Vec<usize> {
    let per_step = pixels.div_ceil(steps);
    let mut counts = vec![0];
    while *counts.last().expect("non-empty") < pixels {
        counts.push((counts.len() * per_step).min(pixels));
    }
    counts
}

/// Separable Gaussian blur of a `(C, H, W)` image with clamped edges.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64, radius: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape("gaussian_blur", "rank", 3, image.rank()));
    };
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_blur", format!("sigma {sigma} must be positive")));
    }
    let r = radius as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(image.len());
    let mut tmp = vec![0.0f64; h * w];
    for plane in image.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn check_dims(image: &Tensor<f32>, saliency: &SaliencyMap) -> Result<(usize, usize, usize)> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape("metric_curve", "rank", 3, image.rank()));
    };
    if saliency.height() != h {
        return Err(Error::shape("metric_curve", "height", h, saliency.height()));
    }
    if saliency.width() != w {
        return Err(Error::shape("metric_curve", "width", w, saliency.width()));
    }
    Ok((c, h, w))
}

const CURVE_BATCH: usize = 32;

/// Probability of `target` on each image, evaluated in fixed-size batches.
fn probabilities(model: &dyn Classifier, images: &[Tensor<f32>], target: usize) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(CURVE_BATCH) {
        let logits = model.logits(&Tensor::stack(chunk)?)?;
        let (_, k) = logits.dims2("metric_curve")?;
        if target >= k {
            return Err(Error::invalid("metric_curve", format!("target {target} outside {k} classes")));
        }
        probs.extend(logits.data().chunks(k).map(|row| softmax(row)[target]));
    }
    Ok(probs)
}

/// Class predicted on the untouched image.
pub fn predicted_class(model: &dyn Classifier, image: &Tensor<f32>) -> Result<usize> {
    let logits = model.logits(&Tensor::stack(std::slice::from_ref(image))?)?;
    Ok(argmax(logits.data()))
}

fn perturbation_curve(
    model: &dyn Classifier,
    image: &Tensor<f32>,
    saliency: &SaliencyMap,
    steps: usize,
    kind: CurveKind,
    start: &Tensor<f32>,
    fill: &Tensor<f32>,
) -> Result<MetricCurve> {
    let (_, h, w) = check_dims(image, saliency)?;
    if steps < 2 {
        return Err(Error::invalid("metric_curve", format!("steps must be at least 2, got {steps}")));
    }
    let target = predicted_class(model, image)?;
    let plane = h * w;
    let order = pixel_order(&saliency.values);
    let counts = step_counts(plane, steps);
    let mut current = start.clone();
    let mut frames = Vec::with_capacity(counts.len());
    let mut done = 0;
    for &count in &counts {
        for &p in &order[done..count] {
            for (dst, src) in current.data_mut().chunks_mut(plane).zip(fill.data().chunks(plane)) {
                dst[p] = src[p];
            }
        }
        done = count;
        frames.push(current.clone());
    }
    let probs = probabilities(model, &frames, target)?;
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / plane as f64).collect();
    let auc = auc(&fractions, &probs)?;
    Ok(MetricCurve {
        kind,
        fractions,
        probs,
        auc,
        target,
    })
}

/// Replaces pixels (all channels) with zero in descending saliency order.
pub fn deletion_curve(model: &dyn Classifier, image: &Tensor<f32>, saliency: &SaliencyMap, steps: usize) -> Result<MetricCurve> {
    let zeros = Tensor::zeros(image.shape());
    perturbation_curve(model, image, saliency, steps, CurveKind::Deletion, image, &zeros)
}

/// Restores original pixels into a blurred copy in descending saliency order.
pub fn insertion_curve(
    model: &dyn Classifier,
    image: &Tensor<f32>,
    saliency: &SaliencyMap,
    steps: usize,
    blur_sigma: f64,
    blur_radius: usize,
) -> Result<MetricCurve> {
    check_dims(image, saliency)?;
    let blurred = gaussian_blur(image, blur_sigma, blur_radius)?;
    perturbation_curve(model, image, saliency, steps, CurveKind::Insertion, &blurred, image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// Index into the evaluated split.
    pub image_id: usize,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
}

/// JSON summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub method: String,
    pub n_images: usize,
    pub steps: usize,
    pub deletion_auc_mean: f64,
    pub deletion_auc_std: f64,
    pub insertion_auc_mean: f64,
    pub insertion_auc_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub summary: MetricsSummary,
    /// Sorted by `image_id`.
    pub records: Vec<ImageRecord>,
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("plain numeric struct serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,deletion_auc,insertion_auc\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.image_id, r.deletion_auc, r.insertion_auc).expect("write to String");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub method: Method,
    pub n_images: usize,
    pub seed: u64,
    pub top_fraction: f64,
    pub curve: CurveConfig,
}

impl EvalConfig {
    pub fn new(method: Method, n_images: usize, seed: u64) -> Self {
        Self {
            method,
            n_images,
            seed,
            top_fraction: DEFAULT_TOP_FRACTION,
            curve: CurveConfig::default(),
        }
    }
}

/// Ids of `n` images drawn without replacement by `seed`, sorted.
pub fn sample_ids(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..len).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n.min(len));
    ids.sort_unstable();
    ids
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image seed for random saliency.
fn image_seed(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deletion and insertion AUCs over a seeded sample of `split`. Images are
/// evaluated in parallel and reduced in image-id order. `n_images` above the
/// split size is clamped.
pub fn evaluate_method(model: &ModelGraph, split: &DatasetSplit, cfg: &EvalConfig) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptyDataset("no images to evaluate".into()));
    }
    if cfg.n_images == 0 {
        return Err(Error::invalid("evaluate_method", "n_images must be at least 1"));
    }
    if cfg.method == Method::Se && !model.se_enabled() {
        return Err(Error::NoSeBlock);
    }
    let ids = sample_ids(split.len(), cfg.n_images, cfg.seed);
    let records = ids
        .par_iter()
        .map(|&id| -> Result<ImageRecord> {
            let image = &split.images[id].pixels;
            let map = explain(model, image, cfg.method, cfg.top_fraction, image_seed(cfg.seed, id))?;
            let del = deletion_curve(model, image, &map, cfg.curve.steps)?;
            let ins = insertion_curve(model, image, &map, cfg.curve.steps, cfg.curve.blur_sigma, cfg.curve.blur_radius)?;
            Ok(ImageRecord {
                image_id: id,
                deletion_auc: del.auc,
                insertion_auc: ins.auc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (deletion_auc_mean, deletion_auc_std) = mean_std(records.iter().map(|r| r.deletion_auc));
    let (insertion_auc_mean, insertion_auc_std) = mean_std(records.iter().map(|r| r.insertion_auc));
    Ok(Evaluation {
        summary: MetricsSummary {
            method: cfg.method.name().to_string(),
            n_images: records.len(),
            steps: cfg.curve.steps,
            deletion_auc_mean,
            deletion_auc_std,
            insertion_auc_mean,
            insertion_auc_std,
        },
        records,
    })
}
