#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use se_explain::model::{ModelGraph, ModelLayer};
use se_explain::se::SeBlockParams;
use se_explain::tensor::{Conv2d, Dense, Layer};
use se_explain::Tensor;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values that stay at least `gap` away from each other and from zero.
pub fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut grid: Vec<f64> = (0..len)
        .map(|i| (i as f64 + 1.0) * gap * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        grid.swap(i, j);
    }
    Tensor::new(shape, grid).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn worst_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn keys_cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 16-tap bicubic evaluation, one output pixel at a time.
pub fn bicubic_oracle(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let mut acc = 0.0;
            for j in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                for i in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                    let yy = j.clamp(0, h as i64 - 1) as usize;
                    let xx = i.clamp(0, w as i64 - 1) as usize;
                    acc += keys_cubic(sy - j as f64) * keys_cubic(sx - i as f64) * values[yy * w + xx];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Direct-loop convolution over `(N, C, H, W)` with zero padding.
pub fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = wt.shape();
    let (co, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt.data()[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

pub fn maxpool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::new();
    for b in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[((b * c + ci) * h + 2 * y + dy) * w + 2 * xo + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(&[n, c, h / 2, w / 2], out).unwrap()
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// `(z, s)` for sample `b` of `u`, from explicit loops.
pub fn se_oracle(u: &Tensor<f64>, b: usize, w1: &Tensor<f64>, w2: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = u.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let z: Vec<f64> = (0..c)
        .map(|ci| {
            let start = (b * c + ci) * hw;
            u.data()[start..start + hw].iter().sum::<f64>() / hw as f64
        })
        .collect();
    let bw = w1.shape()[0];
    let hidden: Vec<f64> = (0..bw)
        .map(|j| (0..c).map(|ci| w1.data()[j * c + ci] * z[ci]).sum::<f64>().max(0.0))
        .collect();
    let gate = (0..c)
        .map(|ci| sigmoid((0..bw).map(|j| w2.data()[ci * bw + j] * hidden[j]).sum()))
        .collect();
    (z, gate)
}

/// `L = sum(R * layer(x))`, checked against central differences in every
/// input and parameter coordinate. Returns the worst relative error.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xabc);
    let out = layer.forward(x).unwrap();
    let proj = uniform(&mut r, out.shape(), -1.0, 1.0);
    let analytic = layer.backward(x, &proj).unwrap();

    let shape = x.shape().to_vec();
    let num_x = numeric_grad(x.data(), FD_STEP, |v| {
        let y = layer.forward(&Tensor::new(&shape, v.to_vec()).unwrap()).unwrap();
        dot(y.data(), proj.data())
    });
    let mut worst = worst_rel(analytic.input_grad.data(), &num_x);

    for p in 0..layer.params().len() {
        let base = layer.params()[p].data().to_vec();
        let num_p = numeric_grad(&base, FD_STEP, |v| {
            layer.params_mut()[p].data_mut().copy_from_slice(v);
            let y = layer.forward(x).unwrap();
            dot(y.data(), proj.data())
        });
        layer.params_mut()[p].data_mut().copy_from_slice(&base);
        worst = worst.max(worst_rel(analytic.param_grads[p].data(), &num_p));
    }
    worst
}

pub fn se_hidden_margin(u: &Tensor<f64>, p: &SeBlockParams<f64>) -> f64 {
    let (n, c) = (u.shape()[0], u.shape()[1]);
    let mut margin = f64::INFINITY;
    for b in 0..n {
        let (z, _) = se_oracle(u, b, &p.w1, &p.w2);
        for row in p.w1.data().chunks(c) {
            margin = margin.min(dot(row, &z).abs());
        }
    }
    margin
}

pub fn tiny_model(seed: u64) -> ModelGraph<f64> {
    let mut r = rng(seed);
    let layers = vec![
        ModelLayer::Conv(Conv2d {
            weights: uniform(&mut r, &[4, 3, 3, 3], -0.4, 0.4),
            bias: uniform(&mut r, &[4], -0.1, 0.1),
            stride: 1,
            padding: 1,
        }),
        ModelLayer::Relu,
        ModelLayer::MaxPool,
        ModelLayer::Conv(Conv2d {
            weights: uniform(&mut r, &[8, 4, 3, 3], -0.4, 0.4),
            bias: uniform(&mut r, &[8], -0.1, 0.1),
            stride: 1,
            padding: 1,
        }),
        ModelLayer::Relu,
        ModelLayer::Se(
            SeBlockParams::from_weights(2, uniform(&mut r, &[4, 8], -1.0, 1.0), uniform(&mut r, &[8, 4], -1.0, 1.0))
                .unwrap(),
        ),
        ModelLayer::Gap,
        ModelLayer::Dense(Dense {
            weights: uniform(&mut r, &[3, 8], -1.0, 1.0),
            bias: uniform(&mut r, &[3], -0.1, 0.1),
        }),
    ];
    ModelGraph::new(layers, 3, [3, 4, 4]).unwrap()
}

/// Smallest distance of any ReLU input from zero, any pool window's runner-up
/// from its maximum, or any SE hidden unit from zero.
pub fn kink_margin(model: &ModelGraph<f64>, x: &Tensor<f64>) -> f64 {
    let trace = model.forward_trace(x).unwrap();
    let mut margin = f64::INFINITY;
    for (layer, input) in model.layers.iter().zip(&trace.inputs) {
        match layer {
            ModelLayer::Relu => {
                margin = input.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
            ModelLayer::MaxPool => {
                let s = input.shape();
                let (h, w) = (s[2], s[3]);
                for plane in input.data().chunks(h * w) {
                    for y in 0..h / 2 {
                        for xo in 0..w / 2 {
                            let mut win: Vec<f64> = (0..4)
                                .map(|k| plane[(2 * y + k / 2) * w + 2 * xo + k % 2])
                                .collect();
                            win.sort_by(|a, b| b.total_cmp(a));
                            margin = margin.min(win[0] - win[1]);
                        }
                    }
                }
            }
            ModelLayer::Se(p) => margin = margin.min(se_hidden_margin(input, p)),
            _ => {}
        }
    }
    margin
}
