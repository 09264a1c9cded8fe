use rayon::prelude::*;

use super::layer::LayerGrad;
use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Spatial output extent of a convolution along one axis.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn check<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<(usize, usize, Self)> {
        let (n, c_in, h, w) = input.dims4(op)?;
        let (c_out, wc_in, kh, kw) = weights.dims4(op)?;
        if wc_in != c_in {
            return Err(Error::shape(op, "input channels", wc_in, c_in));
        }
        if kh != kw {
            return Err(Error::shape(op, "kernel width", kh, kw));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(op, "height", kh, h + 2 * padding));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(op, "width", kw, w + 2 * padding));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            k: kh,
            stride,
            padding,
            out_h: conv_output_extent(h, kh, stride, padding),
            out_w: conv_output_extent(w, kw, stride, padding),
        };
        Ok((n, c_out, geom))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `t`, or `None` in padding.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds one sample into a `(C_in*k*k) x (out_h*out_w)` patch matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], col: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &sample[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let src_row = self.source(oh, kh, self.h);
                        for ow in 0..self.out_w {
                            dst[oh * self.out_w + ow] = match (src_row, self.source(ow, kw, self.w)) {
                                (Some(y), Some(x)) => plane[y * self.w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the sample.
    fn col2im<T: Scalar>(&self, col: &[T], sample: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut sample[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &col[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let Some(y) = self.source(oh, kh, self.h) else {
                            continue;
                        };
                        for ow in 0..self.out_w {
                            if let Some(x) = self.source(ow, kw, self.w) {
                                plane[y * self.w + x] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW batch with `(C_out, C_in, k, k)` weights.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let op = "conv2d_forward";
    let (n, c_out, geom) = ConvGeometry::check(op, input, weights, stride, padding)?;
    if bias.len() != c_out {
        return Err(Error::shape(op, "bias length", c_out, bias.len()));
    }
    let p = geom.positions();
    let kk = geom.patch_len();
    let mut out = Tensor::zeros(&[n, c_out, geom.out_h, geom.out_w]);
    out.data_mut()
        .par_chunks_mut(c_out * p)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut col = vec![T::zero(); kk * p];
            geom.im2col(input.sample(i), &mut col);
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias[co]);
            }
            gemm(
                T::one(),
                MatRef::row_major(weights.data(), c_out, kk),
                MatRef::row_major(&col, kk, p),
                T::one(),
                MatMut::row_major(dst, c_out, p),
            );
        });
    Ok(out)
}

/// Gradients of `sum(conv2d_forward(..) * output_grad)`; `param_grads` is `[weights, bias]`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    output_grad: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<LayerGrad<T>> {
    let op = "conv2d_backward";
    let (n, c_out, geom) = ConvGeometry::check(op, input, weights, stride, padding)?;
    let expected = [n, c_out, geom.out_h, geom.out_w];
    check_same_shape(op, &expected, output_grad.shape())?;
    let p = geom.positions();
    let kk = geom.patch_len();

    let mut input_grad = Tensor::zeros(input.shape());
    let per_sample: Vec<(Vec<T>, Vec<T>)> = input_grad
        .data_mut()
        .par_chunks_mut(geom.c_in * geom.h * geom.w)
        .enumerate()
        .map(|(i, dx)| {
            let dy = output_grad.sample(i);
            let mut col = vec![T::zero(); kk * p];
            geom.im2col(input.sample(i), &mut col);
            let mut dw = vec![T::zero(); c_out * kk];
            gemm(
                T::one(),
                MatRef::row_major(dy, c_out, p),
                MatRef::row_major(&col, kk, p).t(),
                T::zero(),
                MatMut::row_major(&mut dw, c_out, kk),
            );
            let db: Vec<T> = dy.chunks(p).map(|row| row.iter().copied().sum()).collect();
            // col is reused as the patch gradient buffer
            gemm(
                T::one(),
                MatRef::row_major(weights.data(), c_out, kk).t(),
                MatRef::row_major(dy, c_out, p),
                T::zero(),
                MatMut::row_major(&mut col, kk, p),
            );
            geom.col2im(&col, dx);
            (dw, db)
        })
        .collect();

    let mut weight_grad = Tensor::zeros(weights.shape());
    let mut bias_grad = Tensor::zeros(&[c_out]);
    for (dw, db) in &per_sample {
        add_assign(weight_grad.data_mut(), dw);
        add_assign(bias_grad.data_mut(), db);
    }
    Ok(LayerGrad {
        input_grad,
        param_grads: vec![weight_grad, bias_grad],
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("relu_backward", input.shape(), output_grad.shape())?;
    let data = input
        .data()
        .iter()
        .zip(output_grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

fn pool_dims<T: Scalar>(op: &'static str, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(op)?;
    if h % 2 != 0 {
        return Err(Error::invalid(op, format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::invalid(op, format!("width {w} is odd")));
    }
    Ok((n, c, h, w))
}

/// Index inside a 2x2 window of its maximum; ties go to the first in row-major order.
#[inline]
fn window_argmax<T: Scalar>(plane: &[T], w: usize, y: usize, x: usize) -> usize {
    let mut best = y * w + x;
    for idx in [y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1] {
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = pool_dims("maxpool2_forward", input)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                out.push(plane[window_argmax(plane, w, 2 * y, 2 * x)]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn maxpool2_backward<T: Scalar>(input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    let op = "maxpool2_backward";
    let (n, c, h, w) = pool_dims(op, input)?;
    let (oh, ow) = (h / 2, w / 2);
    check_same_shape(op, &[n, c, oh, ow], output_grad.shape())?;
    let mut grad = Tensor::zeros(input.shape());
    for ((plane, dplane), gplane) in input
        .data()
        .chunks(h * w)
        .zip(grad.data_mut().chunks_mut(h * w))
        .zip(output_grad.data().chunks(oh * ow))
    {
        for y in 0..oh {
            for x in 0..ow {
                dplane[window_argmax(plane, w, 2 * y, 2 * x)] += gplane[y * ow + x];
            }
        }
    }
    Ok(grad)
}

/// Mean of one channel plane; the single kernel behind both global average
/// pooling and the squeeze step of the SE block.
#[inline]
pub fn channel_mean<T: Scalar>(plane: &[T]) -> T {
    let sum: T = plane.iter().copied().sum();
    sum / T::from_f64(plane.len() as f64)
}

/// Global average pooling: `(N, C, H, W) -> (N, C)`.
pub fn gap_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("gap_forward")?;
    let data = input.data().chunks(h * w).map(channel_mean).collect();
    Tensor::new(&[n, c], data)
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    let op = "gap_backward";
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape(op, "rank", 4, input_shape.len()));
    };
    check_same_shape(op, &[n, c], output_grad.shape())?;
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in output_grad.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape, data)
}

/// Fully connected layer; any input rank is flattened to `(N, features)`.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let op = "fc_forward";
    let (out_f, in_f) = weights.dims2(op)?;
    let n = input.batch();
    let features = input.len() / n;
    if features != in_f {
        return Err(Error::shape(op, "input features", in_f, features));
    }
    if bias.len() != out_f {
        return Err(Error::shape(op, "bias length", out_f, bias.len()));
    }
    let mut out = Tensor::zeros(&[n, out_f]);
    // one row at a time so each sample's logits do not depend on the batch
    for (i, row) in out.data_mut().chunks_mut(out_f).enumerate() {
        row.copy_from_slice(bias);
        gemm(
            T::one(),
            MatRef::row_major(input.sample(i), 1, in_f),
            MatRef::row_major(weights.data(), out_f, in_f).t(),
            T::one(),
            MatMut::row_major(row, 1, out_f),
        );
    }
    Ok(out)
}

/// `param_grads` is `[weights, bias]`; `input_grad` has the input's original shape.
pub fn fc_backward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
    let op = "fc_backward";
    let (out_f, in_f) = weights.dims2(op)?;
    let n = input.batch();
    if input.len() / n != in_f {
        return Err(Error::shape(op, "input features", in_f, input.len() / n));
    }
    check_same_shape(op, &[n, out_f], output_grad.shape())?;
    let mut input_grad = Tensor::zeros(input.shape());
    gemm(
        T::one(),
        MatRef::row_major(output_grad.data(), n, out_f),
        MatRef::row_major(weights.data(), out_f, in_f),
        T::zero(),
        MatMut::row_major(input_grad.data_mut(), n, in_f),
    );
    let mut weight_grad = Tensor::zeros(weights.shape());
    let mut bias_grad = Tensor::zeros(&[out_f]);
    for i in 0..n {
        let dy = output_grad.sample(i);
        let x = input.sample(i);
        for (o, wrow) in weight_grad.data_mut().chunks_mut(in_f).enumerate() {
            let g = dy[o];
            for (dw, &xv) in wrow.iter_mut().zip(x) {
                *dw += g * xv;
            }
        }
        add_assign(bias_grad.data_mut(), dy);
    }
    Ok(LayerGrad {
        input_grad,
        param_grads: vec![weight_grad, bias_grad],
    })
}

/// Max-shifted softmax of one logit row, evaluated in `f64`.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let op = "softmax_cross_entropy";
    let (n, k) = logits.dims2(op)?;
    if labels.len() != n {
        return Err(Error::shape(op, "batch", n, labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(op, format!("label {label} outside [0, {k})")));
        }
        let probs = softmax(logits.sample(i));
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        grad.extend(probs.iter().enumerate().map(|(j, &p)| {
            let target = if j == label { 1.0 } else { 0.0 };
            T::from_f64((p - target) / n as f64)
        }));
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}

fn check_same_shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
    if expected.len() != actual.len() {
        return Err(Error::shape(op, "rank", expected.len(), actual.len()));
    }
    for (i, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        if e != a {
            let axis = if expected.len() == 4 { AXES[i] } else { ["rows", "cols", "", ""][i.min(3)] };
            return Err(Error::shape(op, axis, e, a));
        }
    }
    Ok(())
}

pub(crate) fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
