//! Pointwise layers: activations, affine scaling, pixel normalization.

use ndarray::Array4;

use crate::data::NormalizationSpec;

use super::{Layer, Mode, Param};

#[derive(Clone)]
pub struct Relu {
    mask: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        x.zip_mut_with(&mask, |v, &m| *v *= m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let mask = self.mask.take().expect("backward without forward");
        grad_out.zip_mut_with(&mask, |g, &m| *g *= m);
        grad_out
    }

    fn name(&self) -> &'static str {
        "relu"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone)]
pub struct LeakyRelu {
    pub slope: f32,
    mask: Option<Array4<f32>>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        LeakyRelu { slope, mask: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let slope = self.slope;
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
        x.zip_mut_with(&mask, |v, &m| *v *= m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let mask = self.mask.take().expect("backward without forward");
        grad_out.zip_mut_with(&mask, |g, &m| *g *= m);
        grad_out
    }

    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone)]
pub struct Tanh {
    output: Option<Array4<f32>>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { output: None }
    }
}

impl Default for Tanh {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Tanh {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        x.mapv_inplace(f32::tanh);
        self.output = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let y = self.output.take().expect("backward without forward");
        grad_out.zip_mut_with(&y, |g, &t| *g *= 1.0 - t * t);
        grad_out
    }

    fn name(&self) -> &'static str {
        "tanh"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// `y = a * x + b` with fixed scalars (not trained).
#[derive(Clone)]
pub struct Scale {
    pub mul: f32,
    pub add: f32,
}

impl Scale {
    pub fn new(mul: f32, add: f32) -> Self {
        Scale { mul, add }
    }
}

impl Layer for Scale {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let (m, a) = (self.mul, self.add);
        x.mapv_inplace(|v| v * m + a);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let m = self.mul;
        grad_out.mapv_inplace(|g| g * m);
        grad_out
    }

    fn name(&self) -> &'static str {
        "scale"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Pixel-domain to model-space conversion as the first layer of every
/// classifier. Backward divides by the per-channel std, so gradients leaving
/// the network are already in pixel units.
#[derive(Clone)]
pub struct Normalize {
    pub spec: NormalizationSpec,
}

impl Normalize {
    pub fn new(spec: NormalizationSpec) -> Self {
        Normalize { spec }
    }
}

impl Layer for Normalize {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        self.spec.apply_batch(&mut x);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        self.spec.grad_to_pixel(&mut grad_out);
        grad_out
    }

    fn name(&self) -> &'static str {
        "normalize"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone)]
pub struct Sigmoid {
    output: Option<Array4<f32>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid { output: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, mut x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        self.output = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let y = self.output.take().expect("backward without forward");
        grad_out.zip_mut_with(&y, |g, &s| *g *= s * (1.0 - s));
        grad_out
    }

    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Smooth activation used by gradient-check oracles (no kinks, so central
/// finite differences converge cleanly).
#[derive(Clone)]
pub struct Softplus {
    input: Option<Array4<f32>>,
}

impl Softplus {
    pub fn new() -> Self {
        Softplus { input: None }
    }
}

impl Default for Softplus {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Softplus {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        self.input = Some(x.clone());
        x.mapv(|v| if v > 20.0 { v } else { (1.0 + v.exp()).ln() })
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let x = self.input.take().expect("backward without forward");
        grad_out.zip_mut_with(&x, |g, &v| *g *= 1.0 / (1.0 + (-v).exp()));
        grad_out
    }

    fn name(&self) -> &'static str {
        "softplus"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// Suppress unused-import lint when Param is only used by sibling modules.
#[allow(unused)]
fn _assert_layer_object_safe(_: &dyn Layer, _: &Param) {}
