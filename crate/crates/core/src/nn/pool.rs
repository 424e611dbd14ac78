//! Pooling layers.

use ndarray::Array4;

use super::{Layer, Mode};

/// Non-overlapping max pooling with a square window.
#[derive(Clone)]
pub struct MaxPool2d {
    pub size: usize,
    argmax: Option<Vec<u32>>, // flat input index per output element
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        MaxPool2d {
            size,
            argmax: None,
            in_dim: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        let k = self.size;
        assert!(h % k == 0 && w % k == 0, "pool size must divide input");
        let (oh, ow) = (h / k, w / k);
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut argmax = vec![0u32; b * c * oh * ow];
        let xs = x.as_slice().unwrap();
        for i in 0..b {
            for ci in 0..c {
                let plane = (i * c + ci) * h * w;
                for py in 0..oh {
                    for px in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = plane + (py * k + dy) * w + px * k + dx;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y[[i, ci, py, px]] = best;
                        argmax[((i * c + ci) * oh + py) * ow + px] = best_idx as u32;
                    }
                }
            }
        }
        self.argmax = Some(argmax);
        self.in_dim = Some((b, c, h, w));
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let argmax = self.argmax.take().expect("backward without forward");
        let dim = self.in_dim.take().unwrap();
        let mut gx = Array4::zeros(dim);
        let gxs = gx.as_slice_mut().unwrap();
        for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
            gxs[idx as usize] += *g;
        }
        gx
    }

    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Global spatial average: `[B, C, H, W]` -> `[B, C, 1, 1]`. Makes feature
/// vectors independent of input resolution.
#[derive(Clone)]
pub struct GlobalAvgPool {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { in_dim: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Array4<f32>, _mode: Mode) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        self.in_dim = Some((b, c, h, w));
        let inv = 1.0 / (h * w) as f32;
        let mut y = Array4::zeros((b, c, 1, 1));
        for i in 0..b {
            for ci in 0..c {
                y[[i, ci, 0, 0]] = x.index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), ci)
                    .sum()
                    * inv;
            }
        }
        y
    }

    fn backward(&mut self, grad_out: Array4<f32>, _accumulate: bool) -> Array4<f32> {
        let (b, c, h, w) = self.in_dim.take().expect("backward without forward");
        let inv = 1.0 / (h * w) as f32;
        let mut gx = Array4::zeros((b, c, h, w));
        for i in 0..b {
            for ci in 0..c {
                let g = grad_out[[i, ci, 0, 0]] * inv;
                gx.index_axis_mut(ndarray::Axis(0), i)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .fill(g);
            }
        }
        gx
    }

    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 2),
            vec![1.0, 5.0, 3.0, 2.0],
        )
        .unwrap();
        let mut p = MaxPool2d::new(2);
        let y = p.forward(x, Mode::Eval);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let gx = p.backward(Array4::ones((1, 1, 1, 1)), true);
        assert_eq!(gx[[0, 0, 0, 1]], 1.0);
        assert_eq!(gx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn gap_averages_and_spreads() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = GlobalAvgPool::new();
        let y = p.forward(x, Mode::Eval);
        assert!((y[[0, 0, 0, 0]] - 2.5).abs() < 1e-6);
        let gx = p.backward(Array4::from_elem((1, 1, 1, 1), 4.0), true);
        assert!(gx.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
