//! Squeeze-and-Excitation channel attention.
//!
//! The block squeezes every channel of a feature map `U` to its spatial mean
//! `z`, maps `z` through a bias-free bottleneck `s = sigmoid(W2 relu(W1 z))`
//! and rescales the channels, `x_c = s_c u_c`. The per-image vector `s` doubles
//! as the channel-importance signal used for explanations: the channels whose
//! `s_c` lie in the upper tail of a normal fit are the ones combined into a
//! heatmap.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{channel_mean, Layer, LayerGrad, Scalar, Tensor};

/// Default bottleneck reduction ratio.
pub const DEFAULT_REDUCTION: usize = 16;

/// Default fraction of channels used for heatmaps.
pub const DEFAULT_TOP_FRACTION: f64 = 0.10;

/// Bottleneck width `max(1, floor(C / r))`.
pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Excitation weights of one SE block. There are no bias terms.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlockParams<T = f32> {
    pub reduction: usize,
    /// `(B, C)`
    pub w1: Tensor<T>,
    /// `(C, B)`
    pub w2: Tensor<T>,
}

impl<T: Scalar> SeBlockParams<T> {
    /// All-zero weights, which gate every channel at exactly 0.5.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::invalid("se_block", "channels and reduction must be positive"));
        }
        let b = bottleneck_width(channels, reduction);
        Ok(Self {
            reduction,
            w1: Tensor::zeros(&[b, channels]),
            w2: Tensor::zeros(&[channels, b]),
        })
    }

    /// Builds from explicit matrices, validating `W1: (B, C)` against `W2: (C, B)`.
    pub fn from_weights(reduction: usize, w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        let (b, c) = w1.dims2("se_block")?;
        let (c2, b2) = w2.dims2("se_block")?;
        if c2 != c {
            return Err(Error::shape("se_block", "W2 rows", c, c2));
        }
        if b2 != b {
            return Err(Error::shape("se_block", "W2 cols", b, b2));
        }
        Ok(Self { reduction, w1, w2 })
    }

    /// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let (b, c) = (self.bottleneck(), self.channels());
        let limit = (6.0 / (b + c) as f64).sqrt();
        for w in self.w1.data_mut().iter_mut().chain(self.w2.data_mut()) {
            *w = T::from_f64(rng.random_range(-limit..limit));
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn bottleneck(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn cast<U: Scalar>(&self) -> SeBlockParams<U> {
        SeBlockParams {
            reduction: self.reduction,
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }
}

/// Squeeze descriptors and excitation output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SeVector<T = f32> {
    pub z: Vec<T>,
    pub s: Vec<T>,
}

/// Per-channel spatial mean of batch item `sample`.
pub fn squeeze<T: Scalar>(u: &Tensor<T>, sample: usize) -> Result<Vec<T>> {
    let (n, _, h, w) = u.dims4("squeeze")?;
    if sample >= n {
        return Err(Error::invalid("squeeze", format!("sample {sample} outside batch of {n}")));
    }
    Ok(u.sample(sample).chunks(h * w).map(channel_mean).collect())
}

fn sigmoid<T: Scalar>(a: T) -> T {
    let s = T::one() / (T::one() + (-a).exp());
    // keep s strictly inside (0, 1) when the logistic saturates in floating point
    s.max(T::min_positive_value())
        .min(T::one() - T::epsilon() / T::from_f64(2.0))
}

/// Hidden pre-activation `W1 z` and gate `s`.
fn excite_parts<T: Scalar>(z: &[T], params: &SeBlockParams<T>) -> (Vec<T>, Vec<T>) {
    let (b, c) = (params.bottleneck(), params.channels());
    let hidden: Vec<T> = params
        .w1
        .data()
        .chunks(c)
        .map(|row| row.iter().zip(z).map(|(&w, &zc)| w * zc).sum())
        .collect();
    let s = params
        .w2
        .data()
        .chunks(b)
        .map(|row| {
            let a: T = row
                .iter()
                .zip(&hidden)
                .map(|(&w, &h)| w * h.max(T::zero()))
                .sum();
            sigmoid(a)
        })
        .collect();
    (hidden, s)
}

/// `s = sigmoid(W2 relu(W1 z))`.
pub fn excite<T: Scalar>(z: &[T], params: &SeBlockParams<T>) -> Result<Vec<T>> {
    if z.len() != params.channels() {
        return Err(Error::shape("excite", "channels", params.channels(), z.len()));
    }
    Ok(excite_parts(z, params).1)
}

/// Multiplies channel `c` of every sample in `u` by `s[c]`.
pub fn scale<T: Scalar>(u: &Tensor<T>, s: &[T]) -> Result<Tensor<T>> {
    let (_, c, h, w) = u.dims4("scale")?;
    if s.len() != c {
        return Err(Error::shape("scale", "channels", c, s.len()));
    }
    let mut x = u.clone();
    for (i, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
        let sc = s[i % c];
        plane.iter_mut().for_each(|v| *v *= sc);
    }
    Ok(x)
}

/// Squeeze, excite and scale every sample of `u`.
pub fn se_forward<T: Scalar>(u: &Tensor<T>, params: &SeBlockParams<T>) -> Result<(Tensor<T>, Vec<SeVector<T>>)> {
    let (n, c, h, w) = u.dims4("se_forward")?;
    if c != params.channels() {
        return Err(Error::shape("se_forward", "channels", params.channels(), c));
    }
    let mut x = u.clone();
    let mut vectors = Vec::with_capacity(n);
    for i in 0..n {
        let z = squeeze(u, i)?;
        let s = excite(&z, params)?;
        for (plane, &sc) in x.sample_mut(i).chunks_mut(h * w).zip(&s) {
            plane.iter_mut().for_each(|v| *v *= sc);
        }
        vectors.push(SeVector { z, s });
    }
    Ok((x, vectors))
}

/// Exact gradients of the block. `param_grads` is `[dW1, dW2]`.
///
/// The input gradient has a direct path `s_c * g` and an indirect path through
/// the squeeze descriptor, spread uniformly over the `H x W` plane.
pub fn se_backward<T: Scalar>(u: &Tensor<T>, params: &SeBlockParams<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
    let op = "se_backward";
    let (n, c, h, w) = u.dims4(op)?;
    if c != params.channels() {
        return Err(Error::shape(op, "channels", params.channels(), c));
    }
    if output_grad.shape() != u.shape() {
        return Err(Error::shape(op, "output_grad length", u.len(), output_grad.len()));
    }
    let b = params.bottleneck();
    let hw = h * w;
    let inv_hw = T::from_f64(1.0 / hw as f64);
    let mut input_grad = Tensor::zeros(u.shape());
    let mut dw1 = Tensor::zeros(params.w1.shape());
    let mut dw2 = Tensor::zeros(params.w2.shape());

    for i in 0..n {
        let z = squeeze(u, i)?;
        let (hidden, s) = excite_parts(&z, params);
        let u_i = u.sample(i);
        let g_i = output_grad.sample(i);

        // ds_c = <g_c, u_c>, then through the sigmoid
        let da: Vec<T> = (0..c)
            .map(|ch| {
                let ds: T = g_i[ch * hw..(ch + 1) * hw]
                    .iter()
                    .zip(&u_i[ch * hw..(ch + 1) * hw])
                    .map(|(&g, &x)| g * x)
                    .sum();
                ds * s[ch] * (T::one() - s[ch])
            })
            .collect();

        let relu_h: Vec<T> = hidden.iter().map(|&v| v.max(T::zero())).collect();
        for (ch, row) in dw2.data_mut().chunks_mut(b).enumerate() {
            for (d, &hv) in row.iter_mut().zip(&relu_h) {
                *d += da[ch] * hv;
            }
        }
        let dhidden: Vec<T> = (0..b)
            .map(|j| {
                if hidden[j] > T::zero() {
                    (0..c).map(|ch| params.w2.data()[ch * b + j] * da[ch]).sum()
                } else {
                    T::zero()
                }
            })
            .collect();
        for (j, row) in dw1.data_mut().chunks_mut(c).enumerate() {
            for (d, &zc) in row.iter_mut().zip(&z) {
                *d += dhidden[j] * zc;
            }
        }
        let dz: Vec<T> = (0..c)
            .map(|ch| (0..b).map(|j| params.w1.data()[j * c + ch] * dhidden[j]).sum())
            .collect();

        let dx = input_grad.sample_mut(i);
        for ch in 0..c {
            let indirect = dz[ch] * inv_hw;
            for k in ch * hw..(ch + 1) * hw {
                dx[k] = s[ch] * g_i[k] + indirect;
            }
        }
    }
    Ok(LayerGrad {
        input_grad,
        param_grads: vec![dw1, dw2],
    })
}

impl<T: Scalar> Layer<T> for SeBlockParams<T> {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(se_forward(input, self)?.0)
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        se_backward(input, self, output_grad)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.w1, &self.w2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w1, &mut self.w2]
    }
}

/// Inverse of the standard normal CDF.
///
/// Rational approximation with relative error below 1.2e-9 over `(0, 1)`
/// (P. J. Acklam's coefficients).
pub fn standard_normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// z-score above which a normal variable falls with probability `fraction`.
pub fn top_fraction_z_score(fraction: f64) -> f64 {
    standard_normal_quantile(1.0 - fraction)
}

/// Channels chosen from an SE vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSelection {
    /// Strictly increasing channel ids; never empty.
    pub indices: Vec<usize>,
    pub threshold: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Selection fell back to plain top-k ranking.
    pub fallback_used: bool,
}

/// Channels whose gate value exceeds `mu + z(fraction) * sigma`, with
/// population moments of `s`. Falls back to the `ceil(fraction * C)` largest
/// values (lower index wins ties) when nothing clears the threshold, when
/// `s` is flat, or when `fraction == 1`.
pub fn select_top_channels<T: Scalar>(s: &[T], fraction: f64) -> Result<ChannelSelection> {
    let op = "select_top_channels";
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(op, format!("fraction {fraction} outside (0, 1]")));
    }
    if s.len() < 2 {
        return Err(Error::invalid(op, format!("need at least 2 channels, got {}", s.len())));
    }
    let values: Vec<f64> = s.iter().map(|v| v.as_f64()).collect();
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();

    let threshold = if fraction >= 1.0 {
        f64::NEG_INFINITY
    } else {
        mu + top_fraction_z_score(fraction) * sigma
    };
    let mut indices: Vec<usize> = if fraction < 1.0 && sigma >= 1e-8 {
        (0..values.len()).filter(|&c| values[c] > threshold).collect()
    } else {
        Vec::new()
    };
    let fallback_used = indices.is_empty();
    if fallback_used {
        indices = top_k(&values, fallback_count(fraction, values.len()));
    }
    Ok(ChannelSelection {
        indices,
        threshold,
        mu,
        sigma,
        fallback_used,
    })
}

/// `ceil(fraction * n)` clamped to `[1, n]`, tolerant of rounding in the product.
pub fn fallback_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the `k` largest values, ties to the lower index, returned sorted.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Sample moments of a value set, accumulated in `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn moments(values: &[f64]) -> Moments {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Moments {
        mean,
        std: m2.sqrt(),
        skewness,
        excess_kurtosis,
    }
}

/// SE values pooled across a dataset and centred on their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SeValueStats {
    /// Centred values, sample-major then channel order.
    pub values: Vec<f64>,
    pub samples: usize,
    /// Mean of the raw gate values before centring.
    pub raw_mean: f64,
    /// Mean of the centred values (zero up to rounding).
    pub mu: f64,
    pub sigma: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Pools SE vectors from a sequence of per-sample gate vectors.
pub fn pool_se_values<I>(vectors: I) -> SeValueStats
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut values = Vec::new();
    let mut samples = 0;
    for s in vectors {
        values.extend(s);
        samples += 1;
    }
    let raw_mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    values.iter_mut().for_each(|v| *v -= raw_mean);
    let m = moments(&values);
    SeValueStats {
        values,
        samples,
        raw_mean,
        mu: m.mean,
        sigma: m.std,
        skewness: m.skewness,
        excess_kurtosis: m.excess_kurtosis,
    }
}
