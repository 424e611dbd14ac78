//! Fully connected layer, flatten, and dropout.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Param};

/// `y = x W^T + b` on `[B, IN, 1, 1]` maps, producing `[B, OUT, 1, 1]`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Param, // [OUT, IN]
    pub bias: Param,   // [OUT]
    pub in_features: usize,
    pub out_features: usize,
    cached_input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Self {
        let (out_f, in_f) = weight.dim();
        assert_eq!(bias.len(), out_f);
        Linear {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            in_features: in_f,
            out_features: out_f,
            cached_input: None,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight.value.view().into_dimensionality().unwrap()
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        assert_eq!(
            (c, h, w),
            (self.in_features, 1, 1),
            "linear expects flattened [B, IN, 1, 1] input"
        );
        let x2 = x.into_shape_with_order((b, self.in_features)).unwrap();
        let mut y = x2.dot(&self.w().t());
        let bias: ndarray::ArrayView1<f32> =
            self.bias.value.view().into_dimensionality().unwrap();
        y += &bias;
        self.cached_input = Some(x2);
        y.into_shape_with_order((b, self.out_features, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32> {
        let x2 = self.cached_input.take().expect("backward without forward");
        let b = grad_out.dim().0;
        let gy = grad_out
            .into_shape_with_order((b, self.out_features))
            .unwrap();
        if accumulate {
            let dw = gy.t().dot(&x2);
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            gw += &dw;
            let mut gb = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            gb += &gy.sum_axis(Axis(0));
        }
        let gx = gy.dot(&self.w());
        gx.into_shape_with_order((b, self.in_features, 1, 1)).unwrap()
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn name(&self) -> &'static str {
        "linear"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// `[B, C, H, W]` -> `[B, C*H*W, 1, 1]`.
#[derive(Clone)]
pub struct Flatten {
    cached_dim: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { cached_dim: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let d = x.dim();
        self.cached_dim = Some(d);
        let (b, c, h, w) = d;
        x.into_shape_with_order((b, c * h * w, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let d = self.cached_dim.take().expect("backward without forward");
        grad_out.into_shape_with_order(d).unwrap()
    }

    fn name(&self) -> &'static str {
        "flatten"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Inverted dropout: scales kept activations by `1/(1-p)` during training,
/// identity at evaluation. Owns a seeded RNG so runs are reproducible.
#[derive(Clone)]
pub struct Dropout {
    pub p: f32,
    rng: ChaCha8Rng,
    mask: Option<Array4<f32>>,
}

impl Dropout {
    pub fn new(p: f32, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, mut x: Array4<f32>, mode: Mode) -> Array4<f32> {
        match mode {
            Mode::Eval => {
                self.mask = None;
                x
            }
            Mode::Train => {
                let keep = 1.0 - self.p;
                let scale = 1.0 / keep;
                let mut mask = Array4::zeros(x.dim());
                for m in mask.iter_mut() {
                    if self.rng.gen::<f32>() < keep {
                        *m = scale;
                    }
                }
                x.zip_mut_with(&mask, |v, &m| *v *= m);
                self.mask = Some(mask);
                x
            }
        }
    }

    fn backward(&mut self, mut grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        if let Some(mask) = self.mask.take() {
            grad_out.zip_mut_with(&mask, |g, &m| *g *= m);
        }
        grad_out
    }

    fn name(&self) -> &'static str {
        "dropout"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn linear_forward_backward() {
        let w = arr2(&[[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]]); // [3, 2]
        let b = arr1(&[0.5f32, -0.5, 0.0]);
        let mut lin = Linear::new(w, b);
        let x = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, -1.0]).unwrap();
        let y = lin.forward(x, Mode::Eval);
        assert_eq!(y[[0, 0, 0, 0]], 1.0 - 2.0 + 0.5);
        assert_eq!(y[[0, 1, 0, 0]], 3.0 - 4.0 - 0.5);
        assert_eq!(y[[0, 2, 0, 0]], 5.0 - 6.0);

        let g = Array4::from_shape_vec((1, 3, 1, 1), vec![1.0, 0.0, 0.0]).unwrap();
        let gx = lin.backward(g, true);
        // d(y0)/dx = first row of W
        assert_eq!(gx[[0, 0, 0, 0]], 1.0);
        assert_eq!(gx[[0, 1, 0, 0]], 2.0);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut d = Dropout::new(0.5, 1);
        let x = Array4::from_elem((1, 1, 10, 10), 1.0f32);
        let y = d.forward(x.clone(), Mode::Eval);
        assert_eq!(y, x);
        let y = d.forward(x, Mode::Train);
        for &v in y.iter() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-6);
        }
    }
}
