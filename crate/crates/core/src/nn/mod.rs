//! Minimal deterministic neural-network stack on `ndarray`.
//!
//! Feature maps are `f32` arrays laid out `[batch, channels, height, width]`.
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` consumes the cache. Parallelism exists only inside the heavy
//! convolution kernels and always reduces in a fixed order, so identical
//! inputs give bitwise-identical outputs regardless of thread count.

pub mod act;
pub mod batchnorm;
pub mod conv;
mod gemm;
pub mod init;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod resblock;

pub use act::{LeakyRelu, Normalize, Relu, Scale, Tanh};
pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::{Dropout, Flatten, Linear};
pub use pool::{GlobalAvgPool, MaxPool2d};
pub use resblock::ResBlock;

use ndarray::{Array4, ArrayD};

/// Forward-pass mode. Affects batch-norm statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }
}

/// A differentiable network stage.
///
/// `backward` returns the gradient with respect to the layer input; when
/// `accumulate` is false the layer must leave its parameter gradients
/// untouched (used when differentiating through frozen models).
pub trait Layer: Send + Sync {
    fn forward(&mut self, x: Array4<f32>, mode: Mode) -> Array4<f32>;
    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32>;

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    /// Non-trained state that still belongs in checkpoints (running
    /// batch-norm statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut ArrayD<f32>)) {}

    fn name(&self) -> &'static str;

    /// Deep copy including caches, so read-only model clones can serve
    /// concurrent attack workers.
    fn clone_box(&self) -> Box<dyn Layer>;
}

impl Clone for Box<dyn Layer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Layers applied in order. Also usable as a single composite [`Layer`].
#[derive(Clone)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, mut x: Array4<f32>, mode: Mode) -> Array4<f32> {
        for layer in &mut self.layers {
            x = layer.forward(x, mode);
        }
        x
    }

    pub fn backward(&mut self, mut g: Array4<f32>, accumulate: bool) -> Array4<f32> {
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(g, accumulate);
        }
        g
    }

    pub fn visit_params_seq(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_buffers_seq(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        for layer in &mut self.layers {
            layer.visit_buffers(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_seq(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_seq(&mut |p| n += p.len());
        n
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: Array4<f32>, mode: Mode) -> Array4<f32> {
        Sequential::forward(self, x, mode)
    }

    fn backward(&mut self, g: Array4<f32>, accumulate: bool) -> Array4<f32> {
        Sequential::backward(self, g, accumulate)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_params_seq(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        self.visit_buffers_seq(f);
    }

    fn name(&self) -> &'static str {
        "sequential"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
