//! GAN-based inversion: a class-conditional generator trained against a
//! discriminator fit on shadow data and against the frozen target model's
//! class loss. The generator never sees real training data; the target
//! model's gradients are the only channel through which training-set
//! information can leak into it.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierModel;
use crate::data::{ImageTensor, ShadowDataset};
use crate::error::{Error, Result};
use crate::nn::{
    act::Sigmoid, init, loss, BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Flatten, Layer,
    LeakyRelu, Linear, Mode, Relu, Scale, Sequential,
};
use crate::training::{Optimizer, OptimizerKind};

/// Generator shape: a one-hot class vector concatenated with Gaussian noise,
/// expanded by seven transpose convolutions. The bounded output mapping
/// (sigmoid scaled by 255) keeps samples inside the pixel range by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_len: usize,
    pub base_width: usize,
    pub out_size: usize,
    pub num_classes: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise_len: 100,
            base_width: 64,
            out_size: 32,
            num_classes: 10,
        }
    }
}

/// Discriminator shape: seven blocks of {5x5 convolution, batch norm, leaky
/// rectifier (slope 0.2), dropout 0.5}, then two linear heads — a real/fake
/// score and class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_width: usize,
    pub in_size: usize,
    pub num_classes: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            base_width: 32,
            in_size: 32,
            num_classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanInversionConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Adaptive-moment optimizer settings for both networks.
    pub lr: f32,
    pub betas: (f32, f32),
    pub batch_size: usize,
    pub epochs: u32,
    /// Weight of the target model's class loss in the generator objective.
    pub lambda_c: f32,
    pub seed: u64,
    /// Persist a one-row-per-class sample grid every N epochs.
    pub sample_every: Option<u32>,
    pub sample_dir: Option<PathBuf>,
}

impl GanInversionConfig {
    pub fn desk(out_size: usize, seed: u64) -> Self {
        GanInversionConfig {
            generator: GeneratorSpec {
                noise_len: 100,
                base_width: 32,
                out_size,
                num_classes: 10,
            },
            discriminator: DiscriminatorSpec {
                base_width: 16,
                in_size: out_size,
                num_classes: 10,
            },
            lr: 2e-4,
            betas: (0.5, 0.999),
            batch_size: 32,
            epochs: 3,
            lambda_c: 1.0,
            seed,
            sample_every: None,
            sample_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_c < 0.0 {
            return Err(Error::config("lambda_c must be nonnegative"));
        }
        if !matches!(self.generator.out_size, 16 | 32) {
            return Err(Error::config("generator out_size must be 16 or 32"));
        }
        if self.discriminator.in_size != self.generator.out_size {
            return Err(Error::config(
                "discriminator input size must match generator output size",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

pub struct Generator {
    pub spec: GeneratorSpec,
    pub net: Sequential,
}

impl Generator {
    pub fn build(spec: GeneratorSpec, rng: &mut ChaCha8Rng) -> Self {
        // (kernel, stride, pad) ladder: 1 -> 4 -> 8 -> ... -> out_size, with
        // stride-1 refinement layers interleaved to land on exactly 7.
        let plan: [(usize, usize, usize); 7] = if spec.out_size == 32 {
            [(4, 1, 0), (4, 2, 1), (3, 1, 1), (4, 2, 1), (3, 1, 1), (4, 2, 1), (3, 1, 1)]
        } else {
            [(4, 1, 0), (4, 2, 1), (3, 1, 1), (4, 2, 1), (3, 1, 1), (3, 1, 1), (3, 1, 1)]
        };
        let b = spec.base_width;
        let widths = [8 * b, 4 * b, 4 * b, 2 * b, 2 * b, b, 3];
        let mut in_c = spec.num_classes + spec.noise_len;
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        for (i, ((k, s, p), &out_c)) in plan.iter().zip(widths.iter()).enumerate() {
            layers.push(Box::new(ConvTranspose2d::new(
                init::conv_normal(rng, in_c, out_c, *k, 0.02),
                Some(Array1::zeros(out_c)),
                *s,
                *p,
            )));
            if i + 1 < plan.len() {
                layers.push(Box::new(Relu::new()));
            }
            in_c = out_c;
        }
        // bounded output mapping onto [0, 255]
        layers.push(Box::new(Sigmoid::new()));
        layers.push(Box::new(Scale::new(255.0, 0.0)));
        Generator {
            spec,
            net: Sequential::new(layers),
        }
    }

    /// Assemble the conditioning input: one-hot class prefix, then standard
    /// normal noise.
    pub fn make_input(&self, labels: &[u8], rng: &mut ChaCha8Rng) -> Array4<f32> {
        let k = self.spec.num_classes;
        let n = labels.len();
        let mut z = Array4::zeros((n, k + self.spec.noise_len, 1, 1));
        for (i, &label) in labels.iter().enumerate() {
            z[[i, label as usize, 0, 0]] = 1.0;
            for j in 0..self.spec.noise_len {
                z[[i, k + j, 0, 0]] = init::gauss(rng);
            }
        }
        z
    }

    /// Forward pass producing pixel-domain images.
    pub fn forward(&mut self, input: Array4<f32>, mode: Mode) -> Array4<f32> {
        self.net.forward(input, mode)
    }

    pub fn zero_grads(&mut self) {
        self.net.zero_grads();
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }
}

/// `n` images conditioned on one class; deterministic under `seed`.
pub fn generate_samples(
    generator: &mut Generator,
    class_id: u8,
    n: usize,
    seed: u64,
) -> Vec<ImageTensor> {
    if n == 0 {
        return Vec::new();
    }
    let labels = vec![class_id; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = generator.make_input(&labels, &mut rng);
    let out = generator.forward(input, Mode::Eval);
    (0..n)
        .map(|i| ImageTensor::from_clipped(out.index_axis(Axis(0), i).to_owned()))
        .collect()
}

pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    trunk: Sequential,
    flatten: Flatten,
    head_rf: Linear,
    head_cls: Linear,
}

impl Discriminator {
    pub fn build(spec: DiscriminatorSpec, rng: &mut ChaCha8Rng, dropout_seed: u64) -> Self {
        let strides: [usize; 7] = if spec.in_size == 32 {
            [1, 2, 1, 2, 1, 2, 1]
        } else {
            [1, 2, 1, 2, 1, 1, 1]
        };
        let b = spec.base_width;
        let widths = [b, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b];
        let mut in_c = 3usize;
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        for (i, (&s, &out_c)) in strides.iter().zip(widths.iter()).enumerate() {
            layers.push(Box::new(Conv2d::new(
                init::conv_normal(rng, out_c, in_c, 5, 0.02),
                Some(Array1::zeros(out_c)),
                s,
                2,
            )));
            layers.push(Box::new(BatchNorm2d::new(out_c)));
            layers.push(Box::new(LeakyRelu::new(0.2)));
            layers.push(Box::new(Dropout::new(0.5, dropout_seed.wrapping_add(i as u64))));
            in_c = out_c;
        }
        let feat = in_c * 4 * 4;
        let (w_rf, b_rf) = init::linear_uniform(rng, 1, feat);
        let (w_cls, b_cls) = init::linear_uniform(rng, spec.num_classes, feat);
        Discriminator {
            spec,
            trunk: Sequential::new(layers),
            flatten: Flatten::new(),
            head_rf: Linear::new(w_rf, b_rf),
            head_cls: Linear::new(w_cls, b_cls),
        }
    }

    /// Returns (real/fake scores `[B]`, class logits `[B, K]`).
    pub fn forward(&mut self, images: &Array4<f32>, mode: Mode) -> (Array1<f32>, Array2<f32>) {
        let t = self.trunk.forward(images.clone(), mode);
        let flat = self.flatten.forward(t, mode);
        let s = self.head_rf.forward(flat.clone(), mode);
        let c = self.head_cls.forward(flat, mode);
        let b = s.dim().0;
        let scores = s.into_shape_with_order(b).unwrap();
        let k = self.spec.num_classes;
        let class_logits = c.into_shape_with_order((b, k)).unwrap();
        (scores, class_logits)
    }

    /// Backward from head gradients; returns the image gradient.
    pub fn backward(
        &mut self,
        g_scores: Array1<f32>,
        g_class: Array2<f32>,
        accumulate: bool,
    ) -> Array4<f32> {
        let b = g_scores.len();
        let g_s = g_scores.into_shape_with_order((b, 1, 1, 1)).unwrap();
        let (b2, k) = g_class.dim();
        debug_assert_eq!(b, b2);
        let g_c = g_class.into_shape_with_order((b, k, 1, 1)).unwrap();
        let mut g_flat = self.head_rf.backward(g_s, accumulate);
        g_flat += &self.head_cls.backward(g_c, accumulate);
        let g = self.flatten.backward(g_flat, accumulate);
        self.trunk.backward(g, accumulate)
    }

    pub fn zero_grads(&mut self) {
        self.trunk.zero_grads();
        self.head_rf.visit_params(&mut |p| p.zero_grad());
        self.head_cls.visit_params(&mut |p| p.zero_grad());
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.trunk.visit_params_seq(f);
        self.head_rf.visit_params(f);
        self.head_cls.visit_params(f);
    }
}

/// Update the discriminator on a real batch plus pre-generated fake images.
/// Fake labels are not an input: the class loss is computed over real images
/// only. Returns (real/fake loss, class loss).
pub fn discriminator_update(
    d: &mut Discriminator,
    opt: &mut Optimizer,
    lr: f32,
    real_images: &Array4<f32>,
    real_labels: &[u8],
    fake_images: &Array4<f32>,
) -> Result<(f32, f32)> {
    if real_images.dim().0 == 0 {
        return Err(Error::Empty("discriminator real batch".into()));
    }
    d.zero_grads();

    let (s_real, c_real) = d.forward(real_images, Mode::Train);
    let (l_rf_real, g_s_real) = loss::bce_with_logits(&s_real.view(), 1.0);
    let (l_cls, g_c_real) = loss::softmax_cross_entropy(&c_real.view(), real_labels);
    d.backward(g_s_real, g_c_real, true);

    let (s_fake, c_fake) = d.forward(fake_images, Mode::Train);
    let (l_rf_fake, g_s_fake) = loss::bce_with_logits(&s_fake.view(), 0.0);
    let g_c_zero = Array2::zeros(c_fake.dim());
    d.backward(g_s_fake, g_c_zero, true);

    step_discriminator(d, opt, lr);
    Ok(((l_rf_real + l_rf_fake) / 2.0, l_cls))
}

fn step_discriminator(d: &mut Discriminator, opt: &mut Optimizer, lr: f32) {
    // Visit through a temporary Sequential-like closure: the optimizer
    // works on any stable visitation order.
    opt.step_visit(lr, &mut |f| d.visit_params(f));
}

/// One discriminator step as used by the training loop: fakes are generated
/// internally from random conditioning labels.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    d: &mut Discriminator,
    g: &mut Generator,
    opt: &mut Optimizer,
    lr: f32,
    shadow_images: &Array4<f32>,
    shadow_labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<(f32, f32)> {
    let n = shadow_images.dim().0;
    let fake_labels: Vec<u8> = (0..n)
        .map(|_| rng.gen_range(0..g.spec.num_classes as u8))
        .collect();
    let input = g.make_input(&fake_labels, rng);
    let fakes = g.forward(input, Mode::Eval);
    discriminator_update(d, opt, lr, shadow_images, shadow_labels, &fakes)
}

/// One generator step: fool the discriminator, and (when `lambda_c > 0`)
/// minimize the frozen target model's class loss on the generated images.
/// Returns (fool loss, target class loss if computed).
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    g: &mut Generator,
    d: &mut Discriminator,
    target: Option<&mut ClassifierModel>,
    opt: &mut Optimizer,
    lr: f32,
    labels: &[u8],
    lambda_c: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, Option<f32>)> {
    g.zero_grads();
    let input = g.make_input(labels, rng);
    let fakes = g.forward(input, Mode::Train);

    let (s_fake, c_fake) = d.forward(&fakes, Mode::Train);
    let (l_fool, g_scores) = loss::bce_with_logits(&s_fake.view(), 1.0);
    let g_c_zero = Array2::zeros(c_fake.dim());
    // discriminator is frozen here: accumulate = false
    let mut g_images = d.backward(g_scores, g_c_zero, false);

    let l_cls = match (lambda_c > 0.0, target) {
        (true, Some(t)) => {
            let logits = t.forward_batch(&fakes, Mode::Eval);
            let (ce, dlogits) = loss::softmax_cross_entropy(&logits.view(), labels);
            let g_t = t.backward_from_logits(dlogits, false);
            g_images.zip_mut_with(&g_t, |a, &b| *a += lambda_c * b);
            Some(ce)
        }
        (true, None) => {
            return Err(Error::config(
                "lambda_c > 0 requires a target model",
            ))
        }
        (false, _) => None,
    };

    g.net.backward(g_images, true);
    opt.step_net(&mut g.net, lr);
    Ok((l_fool, l_cls))
}

/// Per-epoch loss record for the GAN run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanEpochLosses {
    pub epoch: u32,
    pub d_realfake: f32,
    pub d_class: f32,
    pub g_fool: f32,
    pub g_class: Option<f32>,
    /// Mean softmax confidence the target model assigns to the conditioned
    /// class of fresh samples (probe of inversion progress).
    pub target_confidence: Option<f32>,
}

/// Train the inversion GAN. The target model is frozen throughout: it is
/// only ever forwarded and differentiated with respect to its input. Passing
/// `None` with `lambda_c == 0` runs a pure conditional GAN on shadow data,
/// in which case the target is structurally unreachable.
pub fn train_inversion_gan(
    mut target: Option<&mut ClassifierModel>,
    shadow: &ShadowDataset,
    cfg: &GanInversionConfig,
) -> Result<(Generator, Vec<GanEpochLosses>)> {
    cfg.validate()?;
    let ds = shadow.dataset();
    if ds.is_empty() {
        return Err(Error::Empty("shadow dataset".into()));
    }
    if cfg.lambda_c > 0.0 && target.is_none() {
        return Err(Error::config("lambda_c > 0 requires a target model"));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = Generator::build(cfg.generator.clone(), &mut init_rng);
    let mut d = Discriminator::build(
        cfg.discriminator.clone(),
        &mut init_rng,
        cfg.seed.wrapping_add(0xd0),
    );
    let mut opt_g =
        Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).with_betas(cfg.betas);
    let mut opt_d =
        Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).with_betas(cfg.betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x6a17));

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut curves = Vec::new();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut g_cls_seen = false;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<_> = chunk.iter().map(|&i| ds.images[i].clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let real = ImageTensor::batch(&imgs);

            let (d_rf, d_cls) =
                discriminator_step(&mut d, &mut g, &mut opt_d, cfg.lr, &real, &labels, &mut rng)?;
            let fake_labels: Vec<u8> = (0..chunk.len())
                .map(|_| rng.gen_range(0..cfg.generator.num_classes as u8))
                .collect();
            let (g_fool, g_cls) = generator_step(
                &mut g,
                &mut d,
                target.as_deref_mut(),
                &mut opt_g,
                cfg.lr,
                &fake_labels,
                cfg.lambda_c,
                &mut rng,
            )?;
            if !(d_rf.is_finite() && d_cls.is_finite() && g_fool.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batches,
                });
            }
            sums.0 += d_rf as f64;
            sums.1 += d_cls as f64;
            sums.2 += g_fool as f64;
            if let Some(c) = g_cls {
                sums.3 += c as f64;
                g_cls_seen = true;
            }
            batches += 1;
        }

        let confidence = match target.as_deref_mut() {
            Some(t) => Some(probe_confidence(&mut g, t, cfg, epoch)?),
            None => None,
        };
        let n = batches.max(1) as f64;
        let rec = GanEpochLosses {
            epoch: epoch + 1,
            d_realfake: (sums.0 / n) as f32,
            d_class: (sums.1 / n) as f32,
            g_fool: (sums.2 / n) as f32,
            g_class: if g_cls_seen {
                Some((sums.3 / n) as f32)
            } else {
                None
            },
            target_confidence: confidence,
        };
        log::info!(
            "gan epoch {}: d_rf {:.3} d_cls {:.3} g_fool {:.3} g_cls {:?} conf {:?}",
            rec.epoch,
            rec.d_realfake,
            rec.d_class,
            rec.g_fool,
            rec.g_class,
            rec.target_confidence
        );
        curves.push(rec);

        if let (Some(every), Some(dir)) = (cfg.sample_every, cfg.sample_dir.as_ref()) {
            if every > 0 && (epoch + 1) % every == 0 {
                persist_sample_grid(&mut g, dir, epoch + 1, cfg.seed)?;
            }
        }
    }
    Ok((g, curves))
}

/// Mean target-model confidence in the conditioned class over a fresh
/// sample batch (3 per class).
fn probe_confidence(
    g: &mut Generator,
    target: &mut ClassifierModel,
    cfg: &GanInversionConfig,
    epoch: u32,
) -> Result<f32> {
    let k = cfg.generator.num_classes;
    let labels: Vec<u8> = (0..k as u8).flat_map(|c| [c, c, c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xc0f1d << 8) ^ epoch as u64);
    let input = g.make_input(&labels, &mut rng);
    let samples = g.forward(input, Mode::Eval);
    let logits = target.forward_batch(&samples, Mode::Eval);
    let p = loss::softmax(&logits.view());
    let mut acc = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        acc += p[[i, label as usize]];
    }
    Ok((acc / labels.len() as f64) as f32)
}

fn persist_sample_grid(
    g: &mut Generator,
    dir: &Path,
    epoch: u32,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = g.spec.num_classes;
    let s = g.spec.out_size;
    let mut grid = ndarray::Array3::zeros((3, s, s * k));
    for class in 0..k as u8 {
        let sample = generate_samples(g, class, 1, seed ^ (epoch as u64) << 8 ^ class as u64)
            .pop()
            .unwrap();
        grid.slice_mut(ndarray::s![.., .., (class as usize * s)..((class as usize + 1) * s)])
            .assign(sample.pixels());
    }
    let img = ImageTensor::from_clipped(grid);
    crate::data::save_image(&img, &dir.join(format!("gan_samples_epoch{epoch:03}.png")))
}

// ---- generator checkpointing -------------------------------------------

#[derive(Serialize, Deserialize)]
struct GenHeader {
    kind: String,
    spec: GeneratorSpec,
    seed: u64,
    epochs: u32,
    shapes: Vec<Vec<usize>>,
}

pub fn save_generator(g: &mut Generator, seed: u64, epochs: u32, path: &Path) -> Result<()> {
    let mut shapes = Vec::new();
    let mut payload = Vec::new();
    g.net.visit_params_seq(&mut |p| {
        shapes.push(p.value.shape().to_vec());
        for v in p.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = GenHeader {
        kind: "generator".into(),
        spec: g.spec.clone(),
        seed,
        epochs,
        shapes,
    };
    crate::classifiers::checkpoint_container::write(path, &serde_json::to_vec(&header)?, &payload)
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let (header_bytes, payload) = crate::classifiers::checkpoint_container::read(path)?;
    let header: GenHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?;
    if header.kind != "generator" {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: format!("expected generator checkpoint, found `{}`", header.kind),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
    let mut g = Generator::build(header.spec, &mut rng);
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut fail = None;
    let mut shape_iter = header.shapes.into_iter();
    g.net.visit_params_seq(&mut |p| {
        if fail.is_some() {
            return;
        }
        match shape_iter.next() {
            Some(shape) if shape == p.value.shape() => {
                for v in p.value.iter_mut() {
                    match floats.next() {
                        Some(f) => *v = f,
                        None => {
                            fail = Some("payload truncated".to_string());
                            return;
                        }
                    }
                }
            }
            _ => fail = Some("tensor shape mismatch".to_string()),
        }
    });
    if let Some(reason) = fail {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason,
        });
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{build_model, ArchitectureConfig};
    use crate::data::{synth, NormalizationSpec, Split};

    fn tiny_cfg(seed: u64) -> GanInversionConfig {
        let mut cfg = GanInversionConfig::desk(16, seed);
        cfg.generator.base_width = 8;
        cfg.generator.noise_len = 16;
        cfg.discriminator.base_width = 4;
        cfg.batch_size = 16;
        cfg.epochs = 1;
        cfg
    }

    fn tiny_shadow(n: usize) -> ShadowDataset {
        let full = synth::generate_split(5, Split::Validation, n);
        let images = full
            .images
            .iter()
            .map(|i| crate::data::downscale_avg(i, 2))
            .collect();
        let ds = crate::data::LabeledDataset::new(
            images,
            full.labels,
            Split::Validation,
            full.source_indices,
        )
        .unwrap();
        ShadowDataset::from_validation(ds).unwrap()
    }

    #[test]
    fn generator_output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Generator::build(
            GeneratorSpec {
                noise_len: 16,
                base_width: 8,
                out_size: 16,
                num_classes: 10,
            },
            &mut rng,
        );
        let samples = generate_samples(&mut g, 3, 4, 9);
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.shape(), (3, 16, 16));
            assert!(s.pixels().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
        // determinism + diversity
        let again = generate_samples(&mut g, 3, 4, 9);
        assert_eq!(samples[0].pixels(), again[0].pixels());
        assert!(samples[0].l2_distance(&samples[1]).unwrap() > 0.0);
        assert!(generate_samples(&mut g, 3, 0, 9).is_empty());
    }

    #[test]
    fn generator_32px_ladder_lands_on_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Generator::build(
            GeneratorSpec {
                noise_len: 8,
                base_width: 4,
                out_size: 32,
                num_classes: 10,
            },
            &mut rng,
        );
        let s = generate_samples(&mut g, 0, 1, 0);
        assert_eq!(s[0].shape(), (3, 32, 32));
    }

    #[test]
    fn untrained_discriminator_sits_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Discriminator::build(
            DiscriminatorSpec {
                base_width: 4,
                in_size: 16,
                num_classes: 10,
            },
            &mut rng,
            7,
        );
        let shadow = tiny_shadow(16);
        let batch = ImageTensor::batch(&shadow.dataset().images);
        let (scores, _) = d.forward(&batch, Mode::Eval);
        let (l, _) = loss::bce_with_logits(&scores.view(), 1.0);
        // fresh heads emit near-zero scores, so BCE sits near ln 2
        assert!((l - std::f32::consts::LN_2).abs() < 0.2, "loss {l}");
    }

    #[test]
    fn class_loss_ignores_fake_labels() {
        // identical fakes, different hypothetical labels: D update identical
        let shadow = tiny_shadow(16);
        let real = ImageTensor::batch(&shadow.dataset().images);
        let labels = &shadow.dataset().labels;

        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Discriminator::build(
                DiscriminatorSpec {
                    base_width: 4,
                    in_size: 16,
                    num_classes: 10,
                },
                &mut rng,
                42,
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Generator::build(
            GeneratorSpec {
                noise_len: 16,
                base_width: 8,
                out_size: 16,
                num_classes: 10,
            },
            &mut rng,
        );
        let input = g.make_input(&vec![0u8; 16], &mut rng);
        let fakes = g.forward(input, Mode::Eval);

        let mut d1 = build();
        let mut o1 = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).with_betas((0.5, 0.999));
        let (rf1, cls1) =
            discriminator_update(&mut d1, &mut o1, 2e-4, &real, labels, &fakes).unwrap();

        // same fakes; their labels exist only in the caller's head
        let mut d2 = build();
        let mut o2 = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).with_betas((0.5, 0.999));
        let (rf2, cls2) =
            discriminator_update(&mut d2, &mut o2, 2e-4, &real, labels, &fakes).unwrap();

        assert_eq!(rf1, rf2);
        assert_eq!(cls1, cls2);
        let mut p1 = Vec::new();
        d1.visit_params(&mut |p| p1.extend(p.value.iter().copied()));
        let mut p2 = Vec::new();
        d2.visit_params(&mut |p| p2.extend(p.value.iter().copied()));
        assert_eq!(p1, p2);
    }

    #[test]
    fn lambda_zero_never_touches_target() {
        let shadow = tiny_shadow(32);
        let mut cfg = tiny_cfg(1);
        cfg.lambda_c = 0.0;
        // no target model supplied at all: structurally impossible to query
        let (mut g, curves) = train_inversion_gan(None, &shadow, &cfg).unwrap();
        assert_eq!(curves.len(), 1);
        assert!(curves[0].g_class.is_none());
        assert!(curves[0].target_confidence.is_none());
        let s = generate_samples(&mut g, 1, 2, 3);
        assert!(s[0].pixels().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn lambda_positive_without_target_is_config_error() {
        let shadow = tiny_shadow(16);
        let mut cfg = tiny_cfg(2);
        cfg.lambda_c = 1.0;
        assert!(matches!(
            train_inversion_gan(None, &shadow, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_target_head_gives_ln10_class_loss() {
        let shadow = tiny_shadow(16);
        let mut target = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            0,
        )
        .unwrap();
        target.visit_params(&mut |p| p.value.fill(0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Generator::build(
            GeneratorSpec {
                noise_len: 16,
                base_width: 8,
                out_size: 16,
                num_classes: 10,
            },
            &mut rng,
        );
        let mut d = Discriminator::build(
            DiscriminatorSpec {
                base_width: 4,
                in_size: 16,
                num_classes: 10,
            },
            &mut rng,
            3,
        );
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).with_betas((0.5, 0.999));
        let labels: Vec<u8> = (0..8).map(|i| i % 10).collect();
        let (_, l_cls) = generator_step(
            &mut g,
            &mut d,
            Some(&mut target),
            &mut opt,
            2e-4,
            &labels,
            1.0,
            &mut rng,
        )
        .unwrap();
        let expected = (10.0f32).ln();
        assert!((l_cls.unwrap() - expected).abs() < 1e-5);
        let _ = shadow;
    }

    #[test]
    fn frozen_target_is_bit_identical_after_training() {
        let shadow = tiny_shadow(32);
        let mut target = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            9,
        )
        .unwrap();
        let before = target.snapshot_params();
        let mut cfg = tiny_cfg(4);
        cfg.lambda_c = 1.0;
        let _ = train_inversion_gan(Some(&mut target), &shadow, &cfg).unwrap();
        let after = target.snapshot_params();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "target parameters moved");
        }
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Generator::build(
            GeneratorSpec {
                noise_len: 16,
                base_width: 8,
                out_size: 16,
                num_classes: 10,
            },
            &mut rng,
        );
        save_generator(&mut g, 6, 2, &path).unwrap();
        let mut back = load_generator(&path).unwrap();
        let a = generate_samples(&mut g, 4, 2, 13);
        let b = generate_samples(&mut back, 4, 2, 13);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pixels(), y.pixels());
        }
    }
}
