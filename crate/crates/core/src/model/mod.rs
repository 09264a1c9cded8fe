//! Sequential CNN classifier with an optional SE block ahead of global average pooling.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{normalize, LabeledImage, Normalization};
use crate::error::{Error, Result};
use crate::se::{pool_se_values, se_forward, select_top_channels, SeBlockParams, SeValueStats, SeVector};
use crate::tensor::{conv_output_extent, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2, Relu, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Channel width of the last convolution in SmallCNN (the map the SE block sees).
pub const SMALLCNN_FEATURES: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelLayer<T = f32> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool,
    Se(SeBlockParams<T>),
    Gap,
    Dense(Dense<T>),
}

impl<T: Scalar> ModelLayer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            ModelLayer::Conv(_) => "conv2d",
            ModelLayer::Relu => "relu",
            ModelLayer::MaxPool => "maxpool2",
            ModelLayer::Se(_) => "squeeze_excitation",
            ModelLayer::Gap => "global_avg_pool",
            ModelLayer::Dense(_) => "dense",
        }
    }

    fn as_layer(&self) -> &dyn Layer<T> {
        match self {
            ModelLayer::Conv(l) => l,
            ModelLayer::Relu => &Relu,
            ModelLayer::MaxPool => &MaxPool2,
            ModelLayer::Se(l) => l,
            ModelLayer::Gap => &GlobalAvgPool,
            ModelLayer::Dense(l) => l,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.as_layer().params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            ModelLayer::Conv(l) => l.params_mut(),
            ModelLayer::Se(l) => l.params_mut(),
            ModelLayer::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.as_layer().forward(input)
    }

    fn cast<U: Scalar>(&self) -> ModelLayer<U> {
        match self {
            ModelLayer::Conv(l) => ModelLayer::Conv(l.cast()),
            ModelLayer::Relu => ModelLayer::Relu,
            ModelLayer::MaxPool => ModelLayer::MaxPool,
            ModelLayer::Se(l) => ModelLayer::Se(l.cast()),
            ModelLayer::Gap => ModelLayer::Gap,
            ModelLayer::Dense(l) => ModelLayer::Dense(l.cast()),
        }
    }
}

/// Ordered layer list plus the metadata needed to run and persist it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub layers: Vec<ModelLayer<T>>,
    pub num_classes: usize,
    /// `(C, H, W)` of raw input images.
    pub input_shape: [usize; 3],
    /// Applied to raw `[0, 1]` pixels before the first layer.
    pub normalization: Option<Normalization>,
    /// Free-form training metadata persisted in checkpoints.
    pub metadata: BTreeMap<String, String>,
}

/// Result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T = f32> {
    /// `(N, num_classes)`
    pub logits: Tensor<T>,
    /// Feature map entering the SE block (or global pooling without SE).
    pub captured: Tensor<T>,
    /// Per-sample SE vectors; `None` for models without an SE block.
    pub se: Option<Vec<SeVector<T>>>,
}

/// Layer inputs recorded during a forward pass, for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    pub inputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    /// Per layer, in [`ModelLayer::params`] order.
    pub params: Vec<Vec<Tensor<T>>>,
    /// Gradient with respect to the captured feature map.
    pub captured: Tensor<T>,
}

/// `conv3x3(32)-relu-conv3x3(32)-relu-pool-conv3x3(64)-relu-conv3x3(64)-relu-pool-conv3x3(128)-relu-[SE]-GAP-FC`,
/// every convolution with stride 1 and padding 1. Weights start at zero; see
/// [`ModelGraph::initialize`].
pub fn build_smallcnn(num_classes: usize, input_shape: [usize; 3], se_enabled: bool, reduction: usize) -> Result<ModelGraph> {
    let [c, h, w] = input_shape;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "build_smallcnn",
            format!("input height and width must be positive multiples of 4, got {h}x{w}"),
        ));
    }
    if num_classes < 2 || c == 0 {
        return Err(Error::invalid("build_smallcnn", "need at least two classes and one channel"));
    }
    let conv = |c_in: usize, c_out: usize| {
        ModelLayer::Conv(Conv2d {
            weights: Tensor::zeros(&[c_out, c_in, 3, 3]),
            bias: Tensor::zeros(&[c_out]),
            stride: 1,
            padding: 1,
        })
    };
    let mut layers = vec![
        conv(c, 32),
        ModelLayer::Relu,
        conv(32, 32),
        ModelLayer::Relu,
        ModelLayer::MaxPool,
        conv(32, 64),
        ModelLayer::Relu,
        conv(64, 64),
        ModelLayer::Relu,
        ModelLayer::MaxPool,
        conv(64, SMALLCNN_FEATURES),
        ModelLayer::Relu,
    ];
    if se_enabled {
        layers.push(ModelLayer::Se(SeBlockParams::zeros(SMALLCNN_FEATURES, reduction)?));
    }
    layers.push(ModelLayer::Gap);
    layers.push(ModelLayer::Dense(Dense {
        weights: Tensor::zeros(&[num_classes, SMALLCNN_FEATURES]),
        bias: Tensor::zeros(&[num_classes]),
    }));
    ModelGraph::new(layers, num_classes, input_shape)
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates that layer shapes chain and that an SE block, if present,
    /// directly precedes global average pooling.
    pub fn new(layers: Vec<ModelLayer<T>>, num_classes: usize, input_shape: [usize; 3]) -> Result<Self> {
        let model = Self {
            layers,
            num_classes,
            input_shape,
            normalization: None,
            metadata: BTreeMap::new(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let op = "model";
        // Some((c, h, w)) for feature maps, None once flattened to `flat` features
        let [c0, h0, w0] = self.input_shape;
        let mut map = Some((c0, h0, w0));
        let mut flat = 0;
        let mut se_seen = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                ModelLayer::Conv(conv) => {
                    let (c, h, w) = map.ok_or_else(|| Error::invalid(op, format!("layer {i}: conv after flattening")))?;
                    if conv.in_channels() != c {
                        return Err(Error::shape(op, "channels", conv.in_channels(), c));
                    }
                    let k = conv.kernel();
                    if k > h + 2 * conv.padding || k > w + 2 * conv.padding || conv.stride == 0 {
                        return Err(Error::invalid(op, format!("layer {i}: kernel does not fit")));
                    }
                    if conv.bias.len() != conv.out_channels() {
                        return Err(Error::shape(op, "bias length", conv.out_channels(), conv.bias.len()));
                    }
                    map = Some((
                        conv.out_channels(),
                        conv_output_extent(h, k, conv.stride, conv.padding),
                        conv_output_extent(w, k, conv.stride, conv.padding),
                    ));
                }
                ModelLayer::Relu => {}
                ModelLayer::MaxPool => {
                    let (c, h, w) = map.ok_or_else(|| Error::invalid(op, format!("layer {i}: pool after flattening")))?;
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::invalid(op, format!("layer {i}: odd extent {h}x{w} before pooling")));
                    }
                    map = Some((c, h / 2, w / 2));
                }
                ModelLayer::Se(se) => {
                    let (c, _, _) = map.ok_or_else(|| Error::invalid(op, format!("layer {i}: SE after flattening")))?;
                    if se.channels() != c {
                        return Err(Error::shape(op, "channels", se.channels(), c));
                    }
                    if !matches!(self.layers.get(i + 1), Some(ModelLayer::Gap)) {
                        return Err(Error::invalid(op, "the SE block must directly precede global average pooling"));
                    }
                    se_seen += 1;
                }
                ModelLayer::Gap => {
                    let (c, _, _) = map.ok_or_else(|| Error::invalid(op, format!("layer {i}: pooling after flattening")))?;
                    map = None;
                    flat = c;
                }
                ModelLayer::Dense(d) => {
                    let features = match map {
                        Some((c, h, w)) => c * h * w,
                        None => flat,
                    };
                    if d.in_features() != features {
                        return Err(Error::shape(op, "input features", d.in_features(), features));
                    }
                    if d.bias.len() != d.out_features() {
                        return Err(Error::shape(op, "bias length", d.out_features(), d.bias.len()));
                    }
                    map = None;
                    flat = d.out_features();
                }
            }
        }
        if se_seen > 1 {
            return Err(Error::invalid(op, "at most one SE block is supported"));
        }
        if map.is_some() || flat != self.num_classes {
            return Err(Error::shape(op, "classes", self.num_classes, flat));
        }
        self.capture_index()?;
        Ok(())
    }

    pub fn se_enabled(&self) -> bool {
        self.se_index().is_some()
    }

    fn se_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, ModelLayer::Se(_)))
    }

    pub fn se_params(&self) -> Option<&SeBlockParams<T>> {
        self.layers.iter().find_map(|l| match l {
            ModelLayer::Se(p) => Some(p),
            _ => None,
        })
    }

    pub fn se_params_mut(&mut self) -> Option<&mut SeBlockParams<T>> {
        self.layers.iter_mut().find_map(|l| match l {
            ModelLayer::Se(p) => Some(p),
            _ => None,
        })
    }

    /// Index of the layer whose input is the captured feature map.
    pub fn capture_index(&self) -> Result<usize> {
        self.se_index()
            .or_else(|| self.layers.iter().position(|l| matches!(l, ModelLayer::Gap)))
            .ok_or_else(|| Error::invalid("model", "no SE block or global pooling to capture"))
    }

    /// The dense classifier head after global pooling.
    pub fn head(&self) -> Option<&Dense<T>> {
        self.layers.iter().rev().find_map(|l| match l {
            ModelLayer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn head_mut(&mut self) -> Option<&mut Dense<T>> {
        self.layers.iter_mut().rev().find_map(|l| match l {
            ModelLayer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// He-normal convolution and dense weights, zero biases, and uniform
    /// `±sqrt(6 / (fan_in + fan_out))` SE weights, all from `seed`.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                ModelLayer::Conv(Conv2d { weights, bias, .. }) | ModelLayer::Dense(Dense { weights, bias }) => {
                    let fan_in = weights.len() / weights.shape()[0];
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    for w in weights.data_mut() {
                        *w = T::from_f64(normal.sample(&mut rng));
                    }
                    bias.data_mut().fill(T::zero());
                }
                ModelLayer::Se(se) => se.init_uniform(&mut rng),
                _ => {}
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            layers: self.layers.iter().map(ModelLayer::cast).collect(),
            num_classes: self.num_classes,
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Checks the batch shape and applies input normalization.
    pub fn prepare_input(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = batch.dims4("forward")?;
        let [ec, eh, ew] = self.input_shape;
        for (axis, e, a) in [("channels", ec, c), ("height", eh, h), ("width", ew, w)] {
            if e != a {
                return Err(Error::shape("forward", axis, e, a));
            }
        }
        match &self.normalization {
            None => Ok(batch.clone()),
            Some(norm) => Ok(normalize(&batch.cast::<f32>(), norm)?.cast()),
        }
    }

    /// Logits, the captured feature map and per-sample SE vectors.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let capture = self.capture_index()?;
        let mut x = self.prepare_input(batch)?;
        let mut captured = None;
        let mut se = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == capture {
                captured = Some(x.clone());
            }
            x = match layer {
                ModelLayer::Se(params) => {
                    let (out, vectors) = se_forward(&x, params)?;
                    se = Some(vectors);
                    out
                }
                other => other.forward(&x)?,
            };
        }
        Ok(ForwardOutput {
            logits: x,
            captured: captured.expect("capture index inside the layer list"),
            se,
        })
    }

    /// Forward pass that keeps every layer input for [`Self::backward`].
    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<Trace<T>> {
        let mut x = self.prepare_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(&x)?;
            inputs.push(std::mem::replace(&mut x, next));
        }
        Ok(Trace { inputs, logits: x })
    }

    /// Backpropagates `logit_grad` through the recorded trace.
    pub fn backward(&self, trace: &Trace<T>, logit_grad: &Tensor<T>) -> Result<Gradients<T>> {
        let capture = self.capture_index()?;
        let mut grad = logit_grad.clone();
        let mut params = vec![Vec::new(); self.layers.len()];
        let mut captured = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = layer.as_layer().backward(&trace.inputs[i], &grad)?;
            params[i] = g.param_grads;
            grad = g.input_grad;
            if i == capture {
                captured = Some(grad.clone());
            }
        }
        Ok(Gradients {
            params,
            captured: captured.expect("capture index inside the layer list"),
        })
    }

    /// Forward pass that zeroes every channel of the SE output `X` except the
    /// ones `keep` returns for each sample.
    pub fn forward_masked<F>(&self, batch: &Tensor<T>, mut keep: F) -> Result<Tensor<T>>
    where
        F: FnMut(usize, &SeVector<T>) -> Result<Vec<usize>>,
    {
        if !self.se_enabled() {
            return Err(Error::NoSeBlock);
        }
        let mut x = self.prepare_input(batch)?;
        for layer in &self.layers {
            x = match layer {
                ModelLayer::Se(params) => {
                    let (mut out, vectors) = se_forward(&x, params)?;
                    let (_, c, h, w) = out.dims4("forward_masked")?;
                    for (n, v) in vectors.iter().enumerate() {
                        let mut kept = vec![false; c];
                        for idx in keep(n, v)? {
                            *kept.get_mut(idx).ok_or_else(|| {
                                Error::invalid("forward_masked", format!("channel {idx} out of range"))
                            })? = true;
                        }
                        for (plane, keep_it) in out.sample_mut(n).chunks_mut(h * w).zip(kept) {
                            if !keep_it {
                                plane.fill(T::zero());
                            }
                        }
                    }
                    out
                }
                other => other.forward(&x)?,
            };
        }
        Ok(x)
    }

    /// Logits computed only from the SE-selected top `fraction` of channels.
    pub fn forward_ablated(&self, batch: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid("forward_ablated", format!("fraction {fraction} outside (0, 1]")));
        }
        self.forward_masked(batch, |_, v| Ok(select_top_channels(&v.s, fraction)?.indices))
    }
}

/// Pools the SE vectors of up to `max_samples` images and centres them.
pub fn aggregate_se_values<'a, I>(model: &ModelGraph, images: I, max_samples: usize) -> Result<SeValueStats>
where
    I: IntoIterator<Item = &'a LabeledImage>,
{
    if !model.se_enabled() {
        return Err(Error::NoSeBlock);
    }
    const CHUNK: usize = 64;
    let mut vectors = Vec::new();
    let mut pending = Vec::with_capacity(CHUNK);
    let mut flush = |pending: &mut Vec<Tensor<f32>>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let out = model.forward(&Tensor::stack(pending)?)?;
        for v in out.se.expect("SE model") {
            vectors.push(v.s.iter().map(|&x| x as f64).collect::<Vec<f64>>());
        }
        pending.clear();
        Ok(())
    };
    for image in images.into_iter().take(max_samples) {
        pending.push(image.pixels.clone());
        if pending.len() == CHUNK {
            flush(&mut pending)?;
        }
    }
    flush(&mut pending)?;
    if vectors.is_empty() {
        return Err(Error::EmptyDataset("no images to aggregate SE values over".into()));
    }
    Ok(pool_se_values(vectors))
}
