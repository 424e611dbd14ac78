//! Batch normalization over `[B, C, H, W]` feature maps.

use ndarray::{Array1, Array4, ArrayD, Axis};

use super::{Layer, Mode, Param};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Param, // [C]
    pub beta: Param,  // [C]
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    channels: usize,
    // backward cache
    cache: Option<Cache>,
}

#[derive(Clone)]
struct Cache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[channels])),
            running_var: ArrayD::ones(ndarray::IxDyn(&[channels])),
            channels,
            cache: None,
        }
    }

    fn gamma_view(&self) -> ndarray::ArrayView1<'_, f32> {
        self.gamma.value.view().into_dimensionality().unwrap()
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Array4<f32>, mode: Mode) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = (b * h * w) as f32;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ci in 0..c {
                    let lane = x.index_axis(Axis(1), ci);
                    let m = lane.sum() / n;
                    let v = lane.mapv(|e| (e - m) * (e - m)).sum() / n;
                    mean[ci] = m;
                    var[ci] = v;
                }
                // running stats use the unbiased variance
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for ci in 0..c {
                    let rm = &mut self.running_mean[[ci]];
                    *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean[ci];
                    let rv = &mut self.running_var[[ci]];
                    *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => {
                let mean = Array1::from_shape_fn(c, |ci| self.running_mean[[ci]]);
                let var = Array1::from_shape_fn(c, |ci| self.running_var[[ci]]);
                (mean, var)
            }
        };

        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let mut xhat = x;
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|e| (e - m) * is);
        }
        let gamma = self.gamma_view().to_owned();
        let beta: Array1<f32> = self.beta.value.view().into_dimensionality().unwrap().to_owned();
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, bt) = (gamma[ci], beta[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * g + bt);
        }
        self.cache = Some(Cache { xhat, inv_std, mode });
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32> {
        let Cache { xhat, inv_std, mode } = self.cache.take().expect("backward without forward");
        let (b, c, h, w) = grad_out.dim();
        let n = (b * h * w) as f32;
        let gamma = self.gamma_view().to_owned();

        if accumulate {
            let mut ggamma = self.gamma.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut gbeta = self.beta.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for ci in 0..c {
                let gy = grad_out.index_axis(Axis(1), ci);
                let xh = xhat.index_axis(Axis(1), ci);
                ggamma[ci] += (&gy * &xh).sum();
                gbeta[ci] += gy.sum();
            }
        }

        match mode {
            Mode::Eval => {
                // y = gamma * (x - rm) * inv_std + beta, constants w.r.t. x
                let mut gx = grad_out;
                for ci in 0..c {
                    let k = gamma[ci] * inv_std[ci];
                    gx.index_axis_mut(Axis(1), ci).mapv_inplace(|g| g * k);
                }
                gx
            }
            Mode::Train => {
                // dx = (gamma*inv_std/n) * (n*gy - sum(gy) - xhat * sum(gy*xhat))
                let mut gx = Array4::zeros(grad_out.dim());
                for ci in 0..c {
                    let gy = grad_out.index_axis(Axis(1), ci);
                    let xh = xhat.index_axis(Axis(1), ci);
                    let sum_gy = gy.sum();
                    let sum_gy_xhat = (&gy * &xh).sum();
                    let k = gamma[ci] * inv_std[ci] / n;
                    let mut lane = gx.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut lane).and(&gy).and(&xh).for_each(
                        |o, &g, &xv| {
                            *o = k * (n * g - sum_gy - xv * sum_gy_xhat);
                        },
                    );
                }
                gx
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn train_forward_standardizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |_| rng.gen_range(-5.0f32..5.0));
        let mut bn = BatchNorm2d::new(2);
        let y = bn.forward(x, Mode::Train);
        for ci in 0..2 {
            let lane = y.index_axis(Axis(1), ci);
            let n = lane.len() as f32;
            let mean = lane.sum() / n;
            let var = lane.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((3, 1, 2, 2), |_| rng.gen_range(-2.0f32..2.0));
        // loss = sum(y * r) for fixed random r
        let r = Array4::from_shape_fn(x.dim(), |_| rng.gen_range(-1.0f32..1.0));
        let mut bn = BatchNorm2d::new(1);
        bn.forward(x.clone(), Mode::Train);
        let gx = bn.backward(r.clone(), true);

        let eps = 1e-2f32;
        for &(i, h, w) in &[(0usize, 0usize, 0usize), (1, 1, 0), (2, 1, 1)] {
            let mut xp = x.clone();
            xp[[i, 0, h, w]] += eps;
            let mut xm = x.clone();
            xm[[i, 0, h, w]] -= eps;
            let fp: f32 = (BatchNorm2d::new(1).forward(xp, Mode::Train) * &r).sum();
            let fm: f32 = (BatchNorm2d::new(1).forward(xm, Mode::Train) * &r).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (gx[[i, 0, h, w]] - fd).abs() < 5e-3,
                "{} vs {}",
                gx[[i, 0, h, w]],
                fd
            );
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut bn = BatchNorm2d::new(2);
        for _ in 0..5 {
            let x = Array4::from_shape_fn((4, 2, 2, 2), |_| rng.gen_range(-1.0f32..3.0));
            bn.forward(x, Mode::Train);
        }
        let x = Array4::from_shape_fn((2, 2, 2, 2), |_| rng.gen_range(-1.0f32..3.0));
        let a = bn.forward(x.clone(), Mode::Eval);
        let b = bn.forward(x, Mode::Eval);
        assert_eq!(a, b);
    }
}
