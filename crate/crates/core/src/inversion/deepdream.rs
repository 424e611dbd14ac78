//! Multi-scale inversion: optimize from low to high resolution across
//! octaves. Each step ascends the target activation minus a smoothness
//! penalty, with the gradient normalized by its mean absolute value:
//! `X' = clip(X + lr * G / mean|G|)`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierModel;
use crate::data::ImageTensor;
use crate::error::{Error, Result};

use super::{init_image, InitMode, InversionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    pub octaves: u32,
    pub octave_scale: f32,
    pub steps_per_octave: u32,
    pub outer_iterations: u32,
    /// Step size in pixel counts; the normalized gradient has mean absolute
    /// value 1, so a step changes the average pixel by about `lr`.
    pub lr: f32,
    /// Smoothness (total variation) weight. `None` auto-calibrates at the
    /// first step where both gradients are nonzero, matching their mean
    /// magnitudes; the value used is logged.
    pub lambda_tv: Option<f32>,
    #[serde(default)]
    pub init: InitMode,
    pub target_class: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub record_trajectory: bool,
}

fn default_true() -> bool {
    true
}

impl DreamConfig {
    pub fn new(target_class: u8) -> Self {
        DreamConfig {
            octaves: 4,
            octave_scale: 2.0,
            steps_per_octave: 10,
            outer_iterations: 5,
            lr: 2.0,
            lambda_tv: None,
            init: InitMode::default(),
            target_class,
            seed: 0,
            record_trajectory: true,
        }
    }

    pub fn validate(&self, base_resolution: usize) -> Result<()> {
        if self.octaves == 0 {
            return Err(Error::config("octaves must be at least 1"));
        }
        if self.octave_scale <= 1.0 {
            return Err(Error::config("octave_scale must exceed 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        let lowest = octave_sizes(base_resolution, self.octaves, self.octave_scale)
            .first()
            .copied()
            .unwrap_or(0);
        if lowest < 4 {
            return Err(Error::config(format!(
                "octave pyramid bottoms out at {lowest}px; the floor is 4px"
            )));
        }
        Ok(())
    }
}

/// Pyramid side lengths, low to high: `floor(base / scale^k)` for
/// `k = octaves-1 .. 0`.
pub fn octave_sizes(base: usize, octaves: u32, scale: f32) -> Vec<usize> {
    (0..octaves)
        .rev()
        .map(|k| (base as f32 / scale.powi(k as i32)).floor() as usize)
        .collect()
}

/// Downscaled copies of an image, lowest resolution first, highest (the
/// original) last.
pub fn build_octave_pyramid(
    img: &ImageTensor,
    octaves: u32,
    scale: f32,
) -> Result<Vec<ImageTensor>> {
    let (_, h, w) = img.shape();
    if h != w {
        return Err(Error::config("octave pyramid expects square images"));
    }
    let sizes = octave_sizes(h, octaves, scale);
    if sizes.first().copied().unwrap_or(0) < 4 {
        return Err(Error::config(format!(
            "octave pyramid bottoms out below 4px for {h}px base"
        )));
    }
    Ok(sizes
        .iter()
        .map(|&s| resize_bilinear(img, s, s))
        .collect())
}

/// Bilinear resize in the pixel domain. Interpolation is convex, so the
/// output stays in `[0, 255]`; uniform images resize to themselves exactly.
pub fn resize_bilinear(img: &ImageTensor, oh: usize, ow: usize) -> ImageTensor {
    let (c, h, w) = img.shape();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let src = img.pixels();
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = Array3::zeros((c, oh, ow));
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let a = src[[ch, y0, x0]] * (1.0 - tx) + src[[ch, y0, x1]] * tx;
                let b = src[[ch, y1, x0]] * (1.0 - tx) + src[[ch, y1, x1]] * tx;
                out[[ch, y, x]] = a * (1.0 - ty) + b * ty;
            }
        }
    }
    ImageTensor::from_clipped(out)
}

const TV_EPS: f32 = 1e-8;

/// Isotropic total variation and its gradient:
/// `TV(X) = sum sqrt(dx^2 + dy^2 + eps)` over forward differences.
pub fn tv_value_grad(x: &Array3<f32>) -> (f32, Array3<f32>) {
    let (c, h, w) = x.dim();
    let mut value = 0.0f64;
    let mut grad = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let dx = if xx + 1 < w {
                    x[[ch, y, xx + 1]] - x[[ch, y, xx]]
                } else {
                    0.0
                };
                let dy = if y + 1 < h {
                    x[[ch, y + 1, xx]] - x[[ch, y, xx]]
                } else {
                    0.0
                };
                let r = (dx * dx + dy * dy + TV_EPS).sqrt();
                value += r as f64;
                let inv = 1.0 / r;
                grad[[ch, y, xx]] += -(dx + dy) * inv;
                if xx + 1 < w {
                    grad[[ch, y, xx + 1]] += dx * inv;
                }
                if y + 1 < h {
                    grad[[ch, y + 1, xx]] += dy * inv;
                }
            }
        }
    }
    (value as f32, grad)
}

/// Outcome of a single normalized step.
pub struct DreamStepOutcome {
    pub image: ImageTensor,
    /// Mean absolute value of the total gradient before normalization; zero
    /// means the step was skipped.
    pub grad_mean: f32,
    pub activation: f32,
    pub predicted_class: usize,
}

/// One normalized ascent step of `activation - lambda_tv * TV`. A zero
/// total gradient skips the update rather than dividing by zero.
pub fn dream_step(
    x: &ImageTensor,
    model: &mut ClassifierModel,
    class_id: usize,
    lr: f32,
    lambda_tv: f32,
) -> Result<DreamStepOutcome> {
    let batch = ImageTensor::batch(std::slice::from_ref(x));
    let (logits, g_act) = model.activation_gradient_batch(&batch, class_id)?;
    let activation = logits[[0, class_id]];
    let predicted = logits
        .index_axis(ndarray::Axis(0), 0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let g_act3 = g_act.index_axis(ndarray::Axis(0), 0).to_owned();
    let mut g_total = g_act3;
    if lambda_tv != 0.0 {
        let (_, g_tv) = tv_value_grad(x.pixels());
        g_total.zip_mut_with(&g_tv, |g, &t| *g -= lambda_tv * t);
    }
    let mean_abs = g_total.iter().map(|v| v.abs() as f64).sum::<f64>() as f32
        / g_total.len() as f32;
    if mean_abs == 0.0 {
        return Ok(DreamStepOutcome {
            image: x.clone(),
            grad_mean: 0.0,
            activation,
            predicted_class: predicted,
        });
    }
    let scale = lr / mean_abs;
    let mut next = x.pixels().clone();
    next.zip_mut_with(&g_total, |v, &g| *v = (*v + scale * g).clamp(0.0, 255.0));
    Ok(DreamStepOutcome {
        image: ImageTensor::from_clipped(next),
        grad_mean: mean_abs,
        activation,
        predicted_class: predicted,
    })
}

/// The full multi-scale attack. Every outer iteration walks the pyramid
/// from the lowest octave to full resolution, spending `steps_per_octave`
/// normalized steps at each level; between levels the optimized image is
/// upscaled directly.
pub fn invert_class_multiscale(
    model: &mut ClassifierModel,
    model_id: &str,
    cfg: &DreamConfig,
) -> Result<InversionResult> {
    let base = model.arch.input_size();
    cfg.validate(base)?;
    let class = cfg.target_class as usize;
    let channels = model.norm.channels();
    let x0 = init_image(&cfg.init, channels, base, base, cfg.seed)?;
    let sizes = octave_sizes(base, cfg.octaves, cfg.octave_scale);

    let mut full = x0;
    let mut lambda_tv = cfg.lambda_tv;
    let mut trajectory = Vec::new();
    let mut iterations_to_target = None;
    let mut global_step = 0u32;

    for _outer in 0..cfg.outer_iterations {
        let mut cur = resize_bilinear(&full, sizes[0], sizes[0]);
        for (oi, &size) in sizes.iter().enumerate() {
            if oi > 0 {
                cur = resize_bilinear(&cur, size, size);
            }
            for _ in 0..cfg.steps_per_octave {
                let lam = match lambda_tv {
                    Some(l) => l,
                    None => {
                        let cal = calibrate_lambda(&cur, model, class)?;
                        if let Some(l) = cal {
                            lambda_tv = Some(l);
                            l
                        } else {
                            0.0
                        }
                    }
                };
                let out = dream_step(&cur, model, class, cfg.lr, lam)?;
                if cfg.record_trajectory {
                    trajectory.push((global_step, out.activation));
                }
                if iterations_to_target.is_none() && out.predicted_class == class {
                    iterations_to_target = Some(global_step);
                }
                cur = out.image;
                global_step += 1;
            }
        }
        full = cur;
    }

    let final_logits = model.forward_batch(
        &ImageTensor::batch(std::slice::from_ref(&full)),
        crate::nn::Mode::Eval,
    );
    let final_act = final_logits[[0, class]];
    if iterations_to_target.is_none() {
        let pred = final_logits
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == class {
            iterations_to_target = Some(global_step);
        }
    }

    Ok(InversionResult {
        attack_id: "deepdream".into(),
        model_id: model_id.to_string(),
        target_class: cfg.target_class,
        seed: cfg.seed,
        trajectory,
        iterations_to_target,
        final_activation: final_act,
        lr_used: cfg.lr,
        lambda_tv_used: lambda_tv.or(Some(0.0)),
        seed_displacement: None,
        iterations_run: global_step,
        final_image: Some(full),
    })
}

/// Match the mean magnitudes of the activation and smoothness gradients.
/// Returns None while either gradient is all-zero (for example TV on a
/// uniform gray init), in which case calibration retries at the next step.
fn calibrate_lambda(
    x: &ImageTensor,
    model: &mut ClassifierModel,
    class: usize,
) -> Result<Option<f32>> {
    let batch = ImageTensor::batch(std::slice::from_ref(x));
    let (_, g_act) = model.activation_gradient_batch(&batch, class)?;
    let (_, g_tv) = tv_value_grad(x.pixels());
    let ma = g_act.iter().map(|v| v.abs() as f64).sum::<f64>() / g_act.len() as f64;
    let mt = g_tv.iter().map(|v| v.abs() as f64).sum::<f64>() / g_tv.len() as f64;
    if ma > 0.0 && mt > 0.0 {
        Ok(Some((ma / mt) as f32))
    } else {
        Ok(None)
    }
}
