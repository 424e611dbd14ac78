//! Convolution and transpose convolution via im2col + GEMM.

use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};
use rayon::prelude::*;

use super::gemm::{col2im_add, conv_out_size, im2col};
use super::{Layer, Mode, Param};

/// Images per GEMM chunk. Chunks are processed in parallel; all reductions
/// across chunks happen sequentially in chunk order so results do not depend
/// on scheduling.
const CHUNK: usize = 8;

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Param, // [OC, IC, K, K]
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cached_input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(
        weight: Array4<f32>,
        bias: Option<Array1<f32>>,
        stride: usize,
        pad: usize,
    ) -> Self {
        let (oc, ic, k, k2) = weight.dim();
        assert_eq!(k, k2, "square kernels only");
        Conv2d {
            weight: Param::new(weight.into_dyn()),
            bias: bias.map(|b| Param::new(b.into_dyn())),
            in_channels: ic,
            out_channels: oc,
            kernel: k,
            stride,
            pad,
            cached_input: None,
        }
    }

    fn weight_2d(&self) -> Array2<f32> {
        let ckk = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, ckk))
            .unwrap()
            .to_owned()
    }

    fn forward_view(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        let (b, _, h, w) = x.dim();
        let oh = conv_out_size(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_size(w, self.kernel, self.stride, self.pad);
        let w2d = self.weight_2d();
        let mut y = Array4::zeros((b, self.out_channels, oh, ow));

        let x_chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let y_chunks: Vec<_> = y.axis_chunks_iter_mut(Axis(0), CHUNK).collect();
        x_chunks
            .into_par_iter()
            .zip(y_chunks)
            .for_each(|(xc, mut yc)| {
                let n = xc.shape()[0];
                let cols = im2col(&xc, self.kernel, self.stride, self.pad, oh, ow);
                let out2d = w2d.dot(&cols); // [OC, n*OH*OW]
                for i in 0..n {
                    for oc in 0..self.out_channels {
                        let src = out2d.slice(s![oc, i * oh * ow..(i + 1) * oh * ow]);
                        let mut dst = yc.slice_mut(s![i, oc, .., ..]);
                        dst.assign(&src.into_shape_with_order((oh, ow)).unwrap());
                    }
                }
            });

        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (oc, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
                lane += bv[oc];
            }
        }
        y
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let y = self.forward_view(&x.view());
        self.cached_input = Some(x);
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32> {
        let x = self
            .cached_input
            .take()
            .expect("backward called without forward");
        let (_, oc, oh, ow) = grad_out.dim();
        let w2d = self.weight_2d();
        let mut gx = Array4::zeros(x.dim());

        let x_chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let gy_chunks: Vec<_> = grad_out.axis_chunks_iter(Axis(0), CHUNK).collect();
        let gx_chunks: Vec<_> = gx.axis_chunks_iter_mut(Axis(0), CHUNK).collect();

        let per_chunk: Vec<Option<(Array2<f32>, Array1<f32>)>> = x_chunks
            .into_par_iter()
            .zip(gy_chunks)
            .zip(gx_chunks)
            .map(|((xc, gyc), mut gxc)| {
                let n = xc.shape()[0];
                // [OC, n*OH*OW] view of the chunk's output gradient.
                let mut gy2d = Array2::zeros((oc, n * oh * ow));
                for i in 0..n {
                    for c in 0..oc {
                        let src = gyc.slice(s![i, c, .., ..]);
                        let mut dst = gy2d.slice_mut(s![c, i * oh * ow..(i + 1) * oh * ow]);
                        dst.assign(&src.into_shape_with_order(oh * ow).unwrap());
                    }
                }
                let gcols = w2d.t().dot(&gy2d);
                col2im_add(&gcols, &mut gxc, self.kernel, self.stride, self.pad, oh, ow);
                if accumulate {
                    let cols = im2col(&xc, self.kernel, self.stride, self.pad, oh, ow);
                    let dw = gy2d.dot(&cols.t());
                    let db = gy2d.sum_axis(Axis(1));
                    Some((dw, db))
                } else {
                    None
                }
            })
            .collect();

        if accumulate {
            let ckk = self.in_channels * self.kernel * self.kernel;
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, ckk))
                .unwrap();
            for item in per_chunk.iter().flatten() {
                gw += &item.0;
            }
            if let Some(bias) = &mut self.bias {
                let mut gb = bias
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                for item in per_chunk.iter().flatten() {
                    gb += &item.1;
                }
            }
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Transpose convolution (fractionally-strided). Weight layout `[IC, OC, K, K]`;
/// output spatial size is `(in - 1) * stride - 2 * pad + kernel`.
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cached_input: Option<Array4<f32>>,
}

impl ConvTranspose2d {
    pub fn new(
        weight: Array4<f32>,
        bias: Option<Array1<f32>>,
        stride: usize,
        pad: usize,
    ) -> Self {
        let (ic, oc, k, k2) = weight.dim();
        assert_eq!(k, k2);
        ConvTranspose2d {
            weight: Param::new(weight.into_dyn()),
            bias: bias.map(|b| Param::new(b.into_dyn())),
            in_channels: ic,
            out_channels: oc,
            kernel: k,
            stride,
            pad,
            cached_input: None,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn weight_2d(&self) -> Array2<f32> {
        let ockk = self.out_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, ockk))
            .unwrap()
            .to_owned()
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let (b, _, ih, iw) = x.dim();
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let w2d = self.weight_2d(); // [IC, OC*K*K]
        let mut y = Array4::zeros((b, self.out_channels, oh, ow));

        let x_chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let y_chunks: Vec<_> = y.axis_chunks_iter_mut(Axis(0), CHUNK).collect();
        x_chunks
            .into_par_iter()
            .zip(y_chunks)
            .for_each(|(xc, mut yc)| {
                let n = xc.shape()[0];
                // x as [IC, n*IH*IW] columns ordered (image, ih, iw)
                let mut x2d = Array2::zeros((self.in_channels, n * ih * iw));
                for i in 0..n {
                    for c in 0..self.in_channels {
                        let src = xc.slice(s![i, c, .., ..]);
                        let mut dst = x2d.slice_mut(s![c, i * ih * iw..(i + 1) * ih * iw]);
                        dst.assign(&src.into_shape_with_order(ih * iw).unwrap());
                    }
                }
                // Patch columns of the *output*, then scatter-add.
                let cols = w2d.t().dot(&x2d); // [OC*K*K, n*IH*IW]
                col2im_add(&cols, &mut yc, self.kernel, self.stride, self.pad, ih, iw);
            });

        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (c, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
                lane += bv[c];
            }
        }
        self.cached_input = Some(x);
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, accumulate: bool) -> Array4<f32> {
        let x = self
            .cached_input
            .take()
            .expect("backward called without forward");
        let (_, _, ih, iw) = x.dim();
        let w2d = self.weight_2d();
        let mut gx = Array4::zeros(x.dim());

        let x_chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let gy_chunks: Vec<_> = grad_out.axis_chunks_iter(Axis(0), CHUNK).collect();
        let gx_chunks: Vec<_> = gx.axis_chunks_iter_mut(Axis(0), CHUNK).collect();

        let per_chunk: Vec<Option<(Array2<f32>, Array1<f32>)>> = x_chunks
            .into_par_iter()
            .zip(gy_chunks)
            .zip(gx_chunks)
            .map(|((xc, gyc), mut gxc)| {
                let n = xc.shape()[0];
                // The forward is col2im(W^T x), so the data gradient is a
                // regular convolution of grad_out: W * im2col(grad_out).
                let gcols = im2col(&gyc, self.kernel, self.stride, self.pad, ih, iw);
                let gx2d = w2d.dot(&gcols); // [IC, n*IH*IW]
                for i in 0..n {
                    for c in 0..self.in_channels {
                        let src = gx2d.slice(s![c, i * ih * iw..(i + 1) * ih * iw]);
                        let mut dst = gxc.slice_mut(s![i, c, .., ..]);
                        dst.assign(&src.into_shape_with_order((ih, iw)).unwrap());
                    }
                }
                if accumulate {
                    let mut x2d = Array2::zeros((self.in_channels, n * ih * iw));
                    for i in 0..n {
                        for c in 0..self.in_channels {
                            let src = xc.slice(s![i, c, .., ..]);
                            let mut dst =
                                x2d.slice_mut(s![c, i * ih * iw..(i + 1) * ih * iw]);
                            dst.assign(&src.into_shape_with_order(ih * iw).unwrap());
                        }
                    }
                    let dw = x2d.dot(&gcols.t()); // [IC, OC*K*K]
                    let db = {
                        let mut acc = Array1::zeros(self.out_channels);
                        for i in 0..n {
                            for c in 0..self.out_channels {
                                acc[c] += gyc.slice(s![i, c, .., ..]).sum();
                            }
                        }
                        acc
                    };
                    Some((dw, db))
                } else {
                    None
                }
            })
            .collect();

        if accumulate {
            let ockk = self.out_channels * self.kernel * self.kernel;
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.in_channels, ockk))
                .unwrap();
            for item in per_chunk.iter().flatten() {
                gw += &item.0;
            }
            if let Some(bias) = &mut self.bias {
                let mut gb = bias
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                for item in per_chunk.iter().flatten() {
                    gb += &item.1;
                }
            }
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    #[test]
    fn conv_matches_hand_computation() {
        // 1 image, 1 channel 3x3, one 2x2 kernel, stride 1, no pad.
        let x = Array4::from_shape_vec(
            (1, 1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let mut conv = Conv2d::new(w, Some(arr1(&[0.5])), 1, 0);
        let y = conv.forward(x, Mode::Eval);
        // y[i,j] = x[i,j] - x[i+1,j+1] + 0.5
        let expect = [
            [1.0 - 5.0 + 0.5, 2.0 - 6.0 + 0.5],
            [4.0 - 8.0 + 0.5, 5.0 - 9.0 + 0.5],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y[[0, 0, i, j]] - expect[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.gen_range(-1.0f32..1.0));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-0.5f32..0.5));
        let b = arr1(&[0.1f32, -0.2, 0.3]);
        let mut conv = Conv2d::new(w.clone(), Some(b.clone()), 2, 1);

        // loss = sum(y); dL/dy = 1
        let y = conv.forward(x.clone(), Mode::Eval);
        let gx = conv.backward(Array4::ones(y.dim()), true);

        let eps = 1e-2f32;
        // input gradient, a few coordinates
        for &(i, c, h, wi) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[[i, c, h, wi]] += eps;
            let mut xm = x.clone();
            xm[[i, c, h, wi]] -= eps;
            let mut cp = Conv2d::new(w.clone(), Some(b.clone()), 2, 1);
            let fp: f32 = cp.forward(xp, Mode::Eval).sum();
            let fm: f32 = cp.forward(xm, Mode::Eval).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (gx[[i, c, h, wi]] - fd).abs() < 1e-2,
                "input grad mismatch: {} vs {}",
                gx[[i, c, h, wi]],
                fd
            );
        }
        // weight gradient, one coordinate
        let gw = conv.weight.grad.clone();
        let mut wp = w.clone();
        wp[[1, 0, 1, 2]] += eps;
        let mut wm = w.clone();
        wm[[1, 0, 1, 2]] -= eps;
        let fp: f32 = Conv2d::new(wp, Some(b.clone()), 2, 1)
            .forward(x.clone(), Mode::Eval)
            .sum();
        let fm: f32 = Conv2d::new(wm, Some(b), 2, 1).forward(x, Mode::Eval).sum();
        let fd = (fp - fm) / (2.0 * eps);
        let analytic = gw.view().into_dimensionality::<ndarray::Ix4>().unwrap()[[1, 0, 1, 2]];
        assert!((analytic - fd).abs() < 2e-2, "{analytic} vs {fd}");
    }

    #[test]
    fn transpose_conv_upsamples_and_matches_adjoint() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // ConvTranspose with weight W applied to x equals the adjoint of the
        // Conv2d with the same W: <conv(a), x> == <a, tconv(x)>.
        let w = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-0.5f32..0.5)); // [IC=2, OC=3, 4, 4]
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let mut tconv = ConvTranspose2d::new(w.clone(), None, 2, 1);
        let y = tconv.forward(x.clone(), Mode::Eval);
        assert_eq!(y.dim(), (1, 3, 8, 8));

        // conv with weight transposed to [OC_conv=2, IC_conv=3, 4, 4] over a
        // random "a" in the tconv output space
        let a = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0f32..1.0));
        let w_conv = w.clone().permuted_axes([0, 1, 2, 3]); // same memory, conv reads [IC,OC] swapped below
        let mut conv = Conv2d::new(
            {
                // build [2,3,4,4] -> conv wants [OC=2? ] we need conv(a): [B,3,8,8] -> [B,2,4,4]
                let mut wc = Array4::zeros((2, 3, 4, 4));
                for i in 0..2 {
                    for o in 0..3 {
                        for p in 0..4 {
                            for q in 0..4 {
                                wc[[i, o, p, q]] = w_conv[[i, o, p, q]];
                            }
                        }
                    }
                }
                wc
            },
            None,
            2,
            1,
        );
        let ca = conv.forward(a.clone(), Mode::Eval);
        let lhs: f32 = (&ca * &x).sum();
        let rhs: f32 = (&a * &y).sum();
        assert!((lhs - rhs).abs() < 1e-2, "lhs={lhs} rhs={rhs}");
    }
}
