mod common;

use common::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use se_explain::data::{synthetic, Split};
use se_explain::explain::{bicubic_upsample, gradcam, gradcam_parts, random_saliency, se_heatmap, Grid, Method, SaliencyMap};
use se_explain::metrics::{auc, deletion_curve, insertion_curve, Classifier};
use se_explain::model::{ModelGraph, ModelLayer};
use se_explain::se::{excite, moments, scale, se_forward, select_top_channels, squeeze, top_fraction_z_score, ChannelSelection, SeBlockParams};
use se_explain::tensor::{conv2d_forward, fc_forward, gap_forward, maxpool2_forward, relu_forward, Dense, Conv2d};
use se_explain::train::{confusion_matrix, evaluate, sgd_step};
use se_explain::{build_smallcnn, Tensor};

const SEEDS: u64 = 100;

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[test]
fn conv_matches_direct_loops() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let (ci, co) = (r.random_range(1..=8), r.random_range(1..=8));
        let (h, w) = (r.random_range(k..=8), r.random_range(k..=8));
        let x = uniform(&mut r, &[2, ci, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[co, ci, k, k], -1.0, 1.0);
        let bias = uniform(&mut r, &[co], -1.0, 1.0);
        let expected = conv_oracle(&x, &wt, bias.data(), stride, pad);
        let got = conv2d_forward(&x.cast::<f32>(), &wt.cast::<f32>(), &bias.cast::<f32>().into_data(), stride, pad).unwrap();
        assert_eq!(got.shape(), expected.shape());
        worst = worst.max(max_abs_diff(&f64s(&got), expected.data()));
    }
    assert!(worst <= 1e-5, "conv max abs diff {worst:e}");
}

#[test]
fn conv_reference_case() {
    let mut r = rng(2024);
    let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let wt = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let got = conv2d_forward(&x, &wt, bias.data(), 1, 1).unwrap();
    assert_eq!(got.shape(), &[2, 4, 5, 5]);
    assert!(max_abs_diff(got.data(), conv_oracle(&x, &wt, bias.data(), 1, 1).data()) <= 1e-12);
}

#[test]
fn pool_gap_fc_relu_match_direct_loops() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);
        let (n, c) = (r.random_range(1..=3), r.random_range(1..=8));
        let (h, w) = (2 * r.random_range(1..=4), 2 * r.random_range(1..=4));
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let xf = x.cast::<f32>();

        let pool = maxpool2_forward(&xf).unwrap();
        worst = worst.max(max_abs_diff(&f64s(&pool), maxpool_oracle(&x).data()));

        let gap = gap_forward(&xf).unwrap();
        let gap_expected: Vec<f64> = x
            .data()
            .chunks(h * w)
            .map(|p| {
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        acc += p[y * w + xx];
                    }
                }
                acc / (h * w) as f64
            })
            .collect();
        worst = worst.max(max_abs_diff(&f64s(&gap), &gap_expected));

        let relu = relu_forward(&xf);
        let relu_expected: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        worst = worst.max(max_abs_diff(&f64s(&relu), &relu_expected));

        let o = r.random_range(1..=8);
        let feat = c * h * w;
        let wt = uniform(&mut r, &[o, feat], -1.0, 1.0);
        let bias = uniform(&mut r, &[o], -1.0, 1.0);
        let fc = fc_forward(&xf, &wt.cast::<f32>(), &bias.cast::<f32>().into_data()).unwrap();
        let mut fc_expected = Vec::new();
        for b in 0..n {
            for j in 0..o {
                let mut acc = bias.data()[j];
                for i in 0..feat {
                    acc += wt.data()[j * feat + i] * x.data()[b * feat + i];
                }
                fc_expected.push(acc);
            }
        }
        worst = worst.max(max_abs_diff(&f64s(&fc), &fc_expected));
    }
    assert!(worst <= 1e-5, "pool/gap/fc/relu max abs diff {worst:e}");
}

fn random_se(r: &mut rand_chacha::ChaCha8Rng, c: usize) -> SeBlockParams<f64> {
    let reduction = r.random_range(1..=c);
    let b = (c / reduction).max(1);
    SeBlockParams::from_weights(reduction, uniform(r, &[b, c], -2.0, 2.0), uniform(r, &[c, b], -2.0, 2.0)).unwrap()
}

#[test]
fn squeeze_excite_scale_match_direct_loops() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(2000 + seed);
        let (n, c) = (r.random_range(1..=3), r.random_range(1..=8));
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let u = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let p = random_se(&mut r, c);
        let (uf, pf) = (u.cast::<f32>(), p.cast::<f32>());
        let (x, vectors) = se_forward(&uf, &pf).unwrap();
        for b in 0..n {
            let (z, s) = se_oracle(&u, b, &p.w1, &p.w2);
            let zf: Vec<f64> = squeeze(&uf, b).unwrap().iter().map(|&v| v as f64).collect();
            let sf: Vec<f64> = excite(&zf.iter().map(|&v| v as f32).collect::<Vec<_>>(), &pf)
                .unwrap()
                .iter()
                .map(|&v| v as f64)
                .collect();
            worst = worst.max(max_abs_diff(&zf, &z));
            worst = worst.max(max_abs_diff(&sf, &s));
            let vs: Vec<f64> = vectors[b].s.iter().map(|&v| v as f64).collect();
            worst = worst.max(max_abs_diff(&vs, &s));
            for ch in 0..c {
                for k in 0..h * w {
                    let i = (b * c + ch) * h * w + k;
                    worst = worst.max((x.data()[i] as f64 - s[ch] * u.data()[i]).abs());
                }
            }
        }
        // scale alone against an elementwise loop, exactly
        let gate: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0)).collect();
        let scaled = scale(&u, &gate).unwrap();
        for (i, v) in scaled.data().iter().enumerate() {
            assert_eq!(*v, u.data()[i] * gate[(i / (h * w)) % c]);
        }
    }
    assert!(worst <= 1e-5, "SE max abs diff {worst:e}");
}

#[test]
fn squeeze_of_output_is_gate_times_squeeze_of_input() {
    for seed in 0..SEEDS {
        let mut r = rng(3000 + seed);
        let c = r.random_range(2..=8);
        let u = uniform(&mut r, &[1, c, 5, 4], -1.0, 1.0);
        let p = random_se(&mut r, c);
        let (x, vectors) = se_forward(&u, &p).unwrap();
        let zu = squeeze(&u, 0).unwrap();
        let zx = squeeze(&x, 0).unwrap();
        for ch in 0..c {
            assert!((zx[ch] - vectors[0].s[ch] * zu[ch]).abs() <= 1e-6);
        }
    }
}

#[test]
fn bicubic_matches_sixteen_tap_formula() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(4000 + seed);
        let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
        let (oh, ow) = (r.random_range(1..=32), r.random_range(1..=32));
        let values: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = bicubic_upsample(&Grid::new(h, w, values.clone()).unwrap(), oh, ow).unwrap();
        worst = worst.max(max_abs_diff(&got.values, &bicubic_oracle(&values, h, w, oh, ow)));
    }
    assert!(worst <= 1e-5, "bicubic max abs diff {worst:e}");

    let ramp: Vec<f64> = (0..16).map(|i| ((i / 4) + (i % 4)) as f64).collect();
    let got = bicubic_upsample(&Grid::new(4, 4, ramp.clone()).unwrap(), 8, 8).unwrap();
    assert!(max_abs_diff(&got.values, &bicubic_oracle(&ramp, 4, 4, 8, 8)) <= 1e-6);
}

#[test]
fn bicubic_weights_partition_unity() {
    let mut r = rng(5);
    for _ in 0..10_000 {
        let t: f64 = r.random_range(0.0..1.0);
        let sum: f64 = (-1..=2).map(|j| keys_cubic(t - j as f64)).sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn se_heatmap_two_channel_hand_example() {
    let a: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..9).map(|i| ((i * 5) % 9) as f64).collect();
    let captured = Tensor::new(&[2, 3, 3], [a.clone(), b.clone()].concat()).unwrap();
    let selection = ChannelSelection {
        indices: vec![0, 1],
        threshold: 0.0,
        mu: 0.6,
        sigma: 0.2,
        fallback_used: false,
    };
    let map = se_heatmap(&captured, &[0.8, 0.4], &selection, 12, 12).unwrap();
    let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (0.8 * x + 0.4 * y) / 1.2).collect();
    let up = bicubic_oracle(&mean, 3, 3, 12, 12);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let expected: Vec<f64> = up.iter().map(|v| (v - lo) / (hi - lo)).collect();
    assert!(max_abs_diff(&map.values.values, &expected) <= 1e-6);
}

#[test]
fn gradcam_on_linear_head_uses_the_class_weight() {
    // no SE: the capture point is global pooling, so A is the raw image
    let layers = vec![
        ModelLayer::Gap,
        ModelLayer::Dense(Dense {
            weights: Tensor::new(&[2, 1], vec![1.5, -0.7]).unwrap(),
            bias: Tensor::new(&[2], vec![0.0, 0.0]).unwrap(),
        }),
    ];
    let model: ModelGraph<f64> = ModelGraph::new(layers, 2, [1, 4, 4]).unwrap();
    let image = Tensor::new(&[1, 4, 4], (0..16).map(|i| (i as f64 - 6.0) / 4.0).collect()).unwrap();
    for (class, w) in [(0, 1.5), (1, -0.7)] {
        let parts = gradcam_parts(&model, &image, Some(class)).unwrap();
        assert!((parts.alpha[0] - w / 16.0).abs() <= 1e-12);
        let (map, _) = gradcam(&model, &image, Some(class)).unwrap();
        let raw: Vec<f64> = image.data().iter().map(|&a| (w * a).max(0.0)).collect();
        let up = bicubic_oracle(&raw, 4, 4, 4, 4);
        let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let expected: Vec<f64> = up.iter().map(|v| (v - lo) / (hi - lo)).collect();
        assert!(max_abs_diff(&map.values.values, &expected) <= 1e-9);
    }
}

fn normal_cdf(x: f64) -> f64 {
    // Simpson integration of the density from 0
    let n = 20_000;
    let h = x / n as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(0.0) + pdf(x);
    for i in 1..n {
        acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + acc * h / 3.0
}

#[test]
fn z_score_matches_bisection_of_the_cdf() {
    let (mut lo, mut hi) = (0.0, 4.0);
    while hi - lo > 1e-10 {
        let mid = (lo + hi) / 2.0;
        if normal_cdf(mid) < 0.9 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = (lo + hi) / 2.0;
    assert!((oracle - 1.2815516).abs() <= 1e-7);
    assert!((top_fraction_z_score(0.10) - oracle).abs() <= 1e-7);
    for f in [0.01, 0.05, 0.25, 0.5, 0.75] {
        let z = top_fraction_z_score(f);
        assert!((normal_cdf(z) - (1.0 - f)).abs() <= 1e-8, "fraction {f}");
    }
}

#[test]
fn normal_samples_have_small_higher_moments() {
    let dist = Normal::new(0.5, 0.1).unwrap();
    let mut r = rng(77);
    let values: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut r)).collect();
    let m = moments(&values);
    assert!(m.skewness.abs() < 0.1, "skewness {}", m.skewness);
    assert!(m.excess_kurtosis.abs() < 0.2, "kurtosis {}", m.excess_kurtosis);
}

fn small_model(seed: u64) -> ModelGraph<f64> {
    let mut r = rng(seed);
    let layers = vec![
        ModelLayer::Conv(Conv2d {
            weights: uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
            bias: uniform(&mut r, &[4], -0.1, 0.1),
            stride: 1,
            padding: 1,
        }),
        ModelLayer::Relu,
        ModelLayer::MaxPool,
        ModelLayer::Conv(Conv2d {
            weights: uniform(&mut r, &[8, 4, 3, 3], -0.5, 0.5),
            bias: uniform(&mut r, &[8], -0.1, 0.1),
            stride: 1,
            padding: 1,
        }),
        ModelLayer::Relu,
        ModelLayer::Se(random_se(&mut r, 8)),
        ModelLayer::Gap,
        ModelLayer::Dense(Dense {
            weights: uniform(&mut r, &[5, 8], -1.0, 1.0),
            bias: uniform(&mut r, &[5], -0.1, 0.1),
        }),
    ];
    ModelGraph::new(layers, 5, [3, 8, 8]).unwrap()
}

/// Straight-line replay of `small_model`, optionally keeping only some SE channels.
fn replay(model: &ModelGraph<f64>, x: &Tensor<f64>, keep: Option<&dyn Fn(&[f64]) -> Vec<usize>>) -> Vec<f64> {
    let relu = |t: Tensor<f64>| t.map(|v| v.max(0.0));
    let conv = |i: usize, t: &Tensor<f64>| {
        let ModelLayer::Conv(c) = &model.layers[i] else { unreachable!() };
        conv_oracle(t, &c.weights, c.bias.data(), 1, 1)
    };
    let ModelLayer::Se(se) = &model.layers[5] else { unreachable!() };
    let ModelLayer::Dense(fc) = &model.layers[7] else { unreachable!() };
    let a = maxpool_oracle(&relu(conv(0, x)));
    let u = relu(conv(3, &a));
    let (n, c) = (u.shape()[0], u.shape()[1]);
    let mut logits = Vec::new();
    for b in 0..n {
        let (z, s) = se_oracle(&u, b, &se.w1, &se.w2);
        let kept = keep.map(|f| f(&s)).unwrap_or_else(|| (0..c).collect());
        let pooled: Vec<f64> = (0..c)
            .map(|ch| if kept.contains(&ch) { s[ch] * z[ch] } else { 0.0 })
            .collect();
        for j in 0..5 {
            logits.push(fc.bias.data()[j] + (0..c).map(|ch| fc.weights.data()[j * c + ch] * pooled[ch]).sum::<f64>());
        }
    }
    logits
}

#[test]
fn forward_matches_layer_by_layer_replay() {
    for seed in 0..20 {
        let model = small_model(6000 + seed);
        let x = uniform(&mut rng(6100 + seed), &[3, 3, 8, 8], 0.0, 1.0);
        let got = model.forward(&x).unwrap().logits;
        assert!(max_abs_diff(got.data(), &replay(&model, &x, None)) <= 1e-5);
    }
}

#[test]
fn ablated_forward_matches_mask_then_replay() {
    for seed in 0..20 {
        let model = small_model(6200 + seed);
        let x = uniform(&mut rng(6300 + seed), &[2, 3, 8, 8], 0.0, 1.0);
        let got = model.forward_ablated(&x, 0.5).unwrap();
        let keep = |s: &[f64]| select_top_channels(s, 0.5).unwrap().indices;
        assert!(max_abs_diff(got.data(), &replay(&model, &x, Some(&keep))) <= 1e-6);
    }
}

/// Two classes with logits `[w . x, 0]` over a single-channel image.
struct Linear(Vec<f32>);

impl Classifier for Linear {
    fn logits(&self, batch: &Tensor<f32>) -> se_explain::Result<Tensor<f32>> {
        let n = batch.batch();
        let mut out = Vec::new();
        for i in 0..n {
            out.push(batch.sample(i).iter().zip(&self.0).map(|(a, b)| a * b).sum());
            out.push(0.0);
        }
        Tensor::new(&[n, 2], out)
    }
}

fn two_class_prob(model: &Linear, image: &[f32], target: usize) -> f64 {
    let l0: f32 = image.iter().zip(&model.0).map(|(a, b)| a * b).sum();
    let p0 = 1.0 / (1.0 + (-(l0 as f64)).exp());
    if target == 0 { p0 } else { 1.0 - p0 }
}

fn blur_oracle(plane: &[f32], sigma: f64, radius: i64) -> Vec<f32> {
    // direct 2-D sum over the separable kernel with clamped taps
    let g: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let mut out = vec![0.0; 4];
    for y in 0..2i64 {
        for x in 0..2i64 {
            let mut acc = 0.0;
            for (ky, gy) in g.iter().enumerate() {
                for (kx, gx) in g.iter().enumerate() {
                    let yy = (y + ky as i64 - radius).clamp(0, 1);
                    let xx = (x + kx as i64 - radius).clamp(0, 1);
                    acc += gy * gx * plane[(yy * 2 + xx) as usize] as f64;
                }
            }
            out[(y * 2 + x) as usize] = (acc / (total * total)) as f32;
        }
    }
    out
}

#[test]
fn curves_on_a_two_by_two_image_match_enumeration() {
    let model = Linear(vec![1.0, -2.0, 0.5, 3.0]);
    let image = Tensor::new(&[1, 2, 2], vec![0.9, 0.2, 0.6, 0.4]).unwrap();
    let saliency = SaliencyMap::from_raw(Grid::new(2, 2, vec![0.3, 1.0, 0.0, 0.6]).unwrap(), Method::Random);
    let order = [1usize, 3, 0, 2];
    let pristine = image.data().to_vec();
    let target = if two_class_prob(&model, &pristine, 0) >= 0.5 { 0 } else { 1 };

    let deletion = deletion_curve(&model, &image, &saliency, 4).unwrap();
    assert_eq!(deletion.fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(deletion.target, target);
    let mut frame = pristine.clone();
    let mut expected = vec![two_class_prob(&model, &frame, target)];
    for &p in &order {
        frame[p] = 0.0;
        expected.push(two_class_prob(&model, &frame, target));
    }
    assert!(max_abs_diff(&deletion.probs, &expected) <= 1e-6);
    let trapezoid: f64 = expected.windows(2).map(|w| 0.25 * (w[0] + w[1]) / 2.0).sum();
    assert!((deletion.auc - trapezoid).abs() <= 1e-6);

    let insertion = insertion_curve(&model, &image, &saliency, 4, 5.0, 10).unwrap();
    let mut frame = blur_oracle(&pristine, 5.0, 10);
    let mut expected = vec![two_class_prob(&model, &frame, target)];
    for &p in &order {
        frame[p] = pristine[p];
        expected.push(two_class_prob(&model, &frame, target));
    }
    assert!(max_abs_diff(&insertion.probs, &expected) <= 1e-6);
}

#[test]
fn trapezoid_auc_matches_fine_riemann_sum() {
    for seed in 0..20 {
        let mut r = rng(7000 + seed);
        let mut xs: Vec<f64> = (0..98).map(|_| r.random_range(0.0..1.0)).collect();
        xs.push(0.0);
        xs.push(1.0);
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let ys: Vec<f64> = xs.iter().map(|_| r.random_range(0.0..1.0)).collect();
        let n = 2_000_000;
        let mut riemann = 0.0;
        let mut seg = 0;
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            while xs[seg + 1] < t {
                seg += 1;
            }
            let u = (t - xs[seg]) / (xs[seg + 1] - xs[seg]);
            riemann += ys[seg] + u * (ys[seg + 1] - ys[seg]);
        }
        riemann /= n as f64;
        assert!((auc(&xs, &ys).unwrap() - riemann).abs() <= 1e-6);
    }
}

#[test]
fn random_saliency_is_uniform() {
    let map = random_saliency(1000, 1000, 11);
    let mut v = map.values.values.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let ks = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS statistic {ks}");
}

#[test]
fn confusion_matrix_matches_manual_count() {
    let mut model = build_smallcnn(10, [3, 8, 8], true, 16).unwrap();
    model.initialize(3);
    let split = synthetic::generate(50, 10, 8, 4, Split::Test);
    let matrix = confusion_matrix(&model, &split).unwrap();
    let mut manual = vec![vec![0usize; 10]; 10];
    let mut correct = 0;
    for im in &split.images {
        let logits = model.forward(&im.as_batch()).unwrap().logits;
        let mut best = 0;
        for (j, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = j;
            }
        }
        manual[im.label][best] += 1;
        correct += usize::from(best == im.label);
    }
    assert_eq!(matrix, manual);
    assert_eq!(evaluate(&model, &split).unwrap(), correct as f64 / 50.0);
}

#[test]
fn two_sgd_steps_on_a_quadratic() {
    let (a, lr, m, wd) = (3.0, 0.1, 0.9, 0.01);
    let mut p = Tensor::new(&[1], vec![2.0f64]).unwrap();
    let mut v = vec![Tensor::zeros(&[1])];
    for _ in 0..2 {
        let g = Tensor::new(&[1], vec![a * p.data()[0]]).unwrap();
        sgd_step(&mut [&mut p], &[g], &mut v, lr, m, wd).unwrap();
    }
    let p0 = 2.0;
    let v1 = a * p0 + wd * p0;
    let p1 = p0 - lr * v1;
    let v2 = m * v1 + a * p1 + wd * p1;
    let p2 = p1 - lr * v2;
    assert!((p.data()[0] - p2).abs() <= 1e-12);
    assert!((v[0].data()[0] - v2).abs() <= 1e-12);
}
