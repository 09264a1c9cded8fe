use super::ops;
use super::{Scalar, Tensor};
use crate::error::Result;

/// Gradients produced by one backward pass of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T = f32> {
    /// Same shape as the layer input.
    pub input_grad: Tensor<T>,
    /// One entry per parameter, in [`Layer::params`] order.
    pub param_grads: Vec<Tensor<T>>,
}

/// A differentiable map with (possibly no) trainable parameters.
pub trait Layer<T: Scalar> {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>>;

    /// Gradients of `sum(forward(input) * output_grad)`.
    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>>;

    fn params(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `(C_out, C_in, k, k)`
    pub weights: Tensor<T>,
    /// `(C_out,)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d_forward(input, &self.weights, self.bias.data(), self.stride, self.padding)
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        ops::conv2d_backward(input, &self.weights, output_grad, self.stride, self.padding)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    /// `(out_features, in_features)`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::fc_forward(input, &self.weights, self.bias.data())
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        ops::fc_backward(input, &self.weights, output_grad)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Relu;

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu_forward(input))
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        Ok(LayerGrad {
            input_grad: ops::relu_backward(input, output_grad)?,
            param_grads: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaxPool2;

impl<T: Scalar> Layer<T> for MaxPool2 {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::maxpool2_forward(input)
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        Ok(LayerGrad {
            input_grad: ops::maxpool2_backward(input, output_grad)?,
            param_grads: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GlobalAvgPool;

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::gap_forward(input)
    }

    fn backward(&self, input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        Ok(LayerGrad {
            input_grad: ops::gap_backward(input.shape(), output_grad)?,
            param_grads: Vec::new(),
        })
    }
}
