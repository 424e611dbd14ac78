//! Pre-activation residual block for the wide-residual family.

use ndarray::{Array4, ArrayD};
use rand_chacha::ChaCha8Rng;

use super::init::conv_he;
use super::{BatchNorm2d, Conv2d, Layer, Mode, Param};

/// `out = conv2(relu(bn2(conv1(relu(bn1(x)))))) + skip`, where the skip is
/// identity when shapes match and a 1x1 strided projection of the
/// pre-activated input otherwise.
#[derive(Clone)]
pub struct ResBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    projection: Option<Conv2d>,
    mask1: Option<Array4<f32>>,
    mask2: Option<Array4<f32>>,
}

impl ResBlock {
    pub fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(conv_he(rng, out_c, in_c, 3), None, stride, 1);
        let conv2 = Conv2d::new(conv_he(rng, out_c, out_c, 3), None, 1, 1);
        let projection = if stride != 1 || in_c != out_c {
            Some(Conv2d::new(conv_he(rng, out_c, in_c, 1), None, stride, 0))
        } else {
            None
        };
        ResBlock {
            bn1: BatchNorm2d::new(in_c),
            conv1,
            bn2: BatchNorm2d::new(out_c),
            conv2,
            projection,
            mask1: None,
            mask2: None,
        }
    }
}

impl Layer for ResBlock {
    fn forward(&mut self, x: Array4<f32>, mode: Mode) -> Array4<f32> {
        let identity_skip = self.projection.is_none();
        let skip_src = if identity_skip { Some(x.clone()) } else { None };

        let mut h = self.bn1.forward(x, mode);
        let mask1 = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        h.zip_mut_with(&mask1, |v, &m| *v *= m);
        self.mask1 = Some(mask1);

        let skip = match &mut self.projection {
            Some(p) => p.forward(h.clone(), mode),
            None => skip_src.unwrap(),
        };

        let mut a = self.conv1.forward(h, mode);
        a = self.bn2.forward(a, mode);
        let mask2 = a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        a.zip_mut_with(&mask2, |v, &m| *v *= m);
        self.mask2 = Some(mask2);
        let mut y = self.conv2.forward(a, mode);
        y += &skip;
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32> {
        // main branch
        let mut g = self.conv2.backward(grad_out.clone(), accumulate);
        let mask2 = self.mask2.take().expect("backward without forward");
        g.zip_mut_with(&mask2, |v, &m| *v *= m);
        g = self.bn2.backward(g, accumulate);
        let mut g_h = self.conv1.backward(g, accumulate);

        match &mut self.projection {
            Some(p) => {
                // both branches consumed relu(bn1(x))
                let g_skip = p.backward(grad_out, accumulate);
                g_h += &g_skip;
                let mask1 = self.mask1.take().unwrap();
                g_h.zip_mut_with(&mask1, |v, &m| *v *= m);
                self.bn1.backward(g_h, accumulate)
            }
            None => {
                // skip bypassed bn1/relu entirely
                let mask1 = self.mask1.take().unwrap();
                g_h.zip_mut_with(&mask1, |v, &m| *v *= m);
                let mut gx = self.bn1.backward(g_h, accumulate);
                gx += &grad_out;
                gx
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn1.visit_params(f);
        self.conv1.visit_params(f);
        self.bn2.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(p) = &mut self.projection {
            p.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }

    fn name(&self) -> &'static str {
        "res_block"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn finite_diff_check(in_c: usize, out_c: usize, stride: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array4::from_shape_fn((2, in_c, 6, 6), |_| rng.gen_range(-1.0f32..1.0));
        let r = {
            let mut probe = ResBlock::new(&mut ChaCha8Rng::seed_from_u64(3), in_c, out_c, stride);
            let y = probe.forward(x.clone(), Mode::Eval);
            Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0f32..1.0))
        };
        let mut block = ResBlock::new(&mut ChaCha8Rng::seed_from_u64(3), in_c, out_c, stride);
        block.forward(x.clone(), Mode::Eval);
        let gx = block.backward(r.clone(), false);

        let eps = 1e-2f32;
        for &(i, c, h, w) in &[(0usize, 0usize, 0usize, 0usize), (1, in_c - 1, 3, 5)] {
            let mut xp = x.clone();
            xp[[i, c, h, w]] += eps;
            let mut xm = x.clone();
            xm[[i, c, h, w]] -= eps;
            let fp: f32 = (ResBlock::new(&mut ChaCha8Rng::seed_from_u64(3), in_c, out_c, stride)
                .forward(xp, Mode::Eval)
                * &r)
                .sum();
            let fm: f32 = (ResBlock::new(&mut ChaCha8Rng::seed_from_u64(3), in_c, out_c, stride)
                .forward(xm, Mode::Eval)
                * &r)
                .sum();
            let fd = (fp - fm) / (2.0 * eps);
            let got = gx[[i, c, h, w]];
            assert!(
                (got - fd).abs() < 0.05 * fd.abs().max(1.0),
                "grad mismatch at {:?}: {} vs {}",
                (i, c, h, w),
                got,
                fd
            );
        }
    }

    #[test]
    fn identity_skip_gradients() {
        finite_diff_check(4, 4, 1);
    }

    #[test]
    fn projection_skip_gradients() {
        finite_diff_check(4, 8, 2);
    }
}
