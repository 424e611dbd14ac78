//! The model zoo: VGG-style and wide-residual classifiers behind a single
//! differentiable abstraction exposing exactly what the attacks and metrics
//! need — logits, per-class pre-softmax activation, input gradients in pixel
//! units, and pooled final-conv feature vectors.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Raw checkpoint container, shared with generator checkpoints.
pub mod checkpoint_container {
    pub use super::checkpoint::{read_container as read, write_container as write};
}

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, NormalizationSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{
    self, init, loss, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d,
    Mode, Normalize, Relu, ResBlock, Sequential,
};

/// Training regime of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeTag {
    /// Traditionally trained.
    Ttm,
    /// Adversarially trained.
    Atm,
}

impl std::fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegimeTag::Ttm => write!(f, "ttm"),
            RegimeTag::Atm => write!(f, "atm"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchitectureConfig {
    /// Wide residual network; depth must satisfy `depth = 6n + 4`.
    WideResnet {
        depth: usize,
        width: usize,
        input_size: usize,
        num_classes: usize,
    },
    /// VGG16 convolutional stack with the fully connected head resized for
    /// small inputs.
    Vgg16Style {
        input_size: usize,
        num_classes: usize,
    },
    /// Escape hatch for hand-assembled models (tests, oracles). Not
    /// reconstructible from config alone.
    Custom {
        id: String,
        input_size: usize,
        num_classes: usize,
    },
}

impl ArchitectureConfig {
    pub fn wide_resnet(depth: usize, width: usize, input_size: usize) -> Self {
        ArchitectureConfig::WideResnet {
            depth,
            width,
            input_size,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn vgg16(input_size: usize) -> Self {
        ArchitectureConfig::Vgg16Style {
            input_size,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ArchitectureConfig::WideResnet {
                depth,
                width,
                input_size,
                num_classes,
            } => {
                if depth < 10 || (depth - 4) % 6 != 0 {
                    return Err(Error::config(format!(
                        "wide_resnet depth must be 6n+4 with n >= 1, got {depth}"
                    )));
                }
                if width == 0 {
                    return Err(Error::config("wide_resnet width must be positive"));
                }
                if input_size < 8 || input_size % 4 != 0 {
                    return Err(Error::config(format!(
                        "wide_resnet input size must be a multiple of 4 and at least 8, got {input_size}"
                    )));
                }
                if num_classes == 0 {
                    return Err(Error::config("num_classes must be positive"));
                }
                Ok(())
            }
            ArchitectureConfig::Vgg16Style {
                input_size,
                num_classes,
            } => {
                if input_size % 32 != 0 || input_size == 0 {
                    return Err(Error::config(format!(
                        "vgg16_style input size must be a positive multiple of 32, got {input_size}"
                    )));
                }
                if num_classes == 0 {
                    return Err(Error::config("num_classes must be positive"));
                }
                Ok(())
            }
            ArchitectureConfig::Custom { .. } => Ok(()),
        }
    }

    pub fn input_size(&self) -> usize {
        match *self {
            ArchitectureConfig::WideResnet { input_size, .. } => input_size,
            ArchitectureConfig::Vgg16Style { input_size, .. } => input_size,
            ArchitectureConfig::Custom { input_size, .. } => input_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ArchitectureConfig::WideResnet { num_classes, .. } => num_classes,
            ArchitectureConfig::Vgg16Style { num_classes, .. } => num_classes,
            ArchitectureConfig::Custom { num_classes, .. } => num_classes,
        }
    }

    pub fn short_name(&self) -> String {
        match self {
            ArchitectureConfig::WideResnet { depth, width, .. } => format!("wrn-{depth}-{width}"),
            ArchitectureConfig::Vgg16Style { .. } => "vgg16".to_string(),
            ArchitectureConfig::Custom { id, .. } => id.clone(),
        }
    }
}

/// A differentiable classifier.
///
/// Pixels go in, logits come out; normalization happens inside, and input
/// gradients come back out in pixel units. The `body` ends at the pooled
/// final-conv feature vector; the `head` maps features to logits.
#[derive(Clone)]
pub struct ClassifierModel {
    pub arch: ArchitectureConfig,
    pub norm: NormalizationSpec,
    pub regime: RegimeTag,
    pub epochs_trained: u32,
    pub seed: u64,
    pub(crate) body: Sequential,
    pub(crate) head: Sequential,
}

impl ClassifierModel {
    /// Assemble from explicit parts. The normal path is [`build_model`].
    pub fn from_networks(
        arch: ArchitectureConfig,
        norm: NormalizationSpec,
        regime: RegimeTag,
        seed: u64,
        body: Sequential,
        head: Sequential,
    ) -> Self {
        ClassifierModel {
            arch,
            norm,
            regime,
            epochs_trained: 0,
            seed,
            body,
            head,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn param_count(&mut self) -> usize {
        self.body.param_count() + self.head.param_count()
    }

    /// Forward a pixel-domain batch `[B, C, H, W]` to logits `[B, K]`.
    pub fn forward_batch(&mut self, batch: &Array4<f32>, mode: Mode) -> Array2<f32> {
        let features = self.body.forward(batch.clone(), mode);
        let logits = self.head.forward(features, mode);
        let (b, k, _, _) = logits.dim();
        logits.into_shape_with_order((b, k)).unwrap()
    }

    /// Backpropagate from a logit gradient `[B, K]`. Returns the input
    /// gradient in pixel units; parameter gradients accumulate only when
    /// `accumulate` is set.
    pub fn backward_from_logits(&mut self, dlogits: Array2<f32>, accumulate: bool) -> Array4<f32> {
        let (b, k) = dlogits.dim();
        let g = dlogits.into_shape_with_order((b, k, 1, 1)).unwrap();
        let g_feat = self.head.backward(g, accumulate);
        self.body.backward(g_feat, accumulate)
    }

    pub fn forward_logits(&mut self, img: &ImageTensor) -> Array1<f32> {
        let batch = ImageTensor::batch(std::slice::from_ref(img));
        let logits = self.forward_batch(&batch, Mode::Eval);
        logits.index_axis(ndarray::Axis(0), 0).to_owned()
    }

    /// Pre-softmax activation of `class_id`; equals `forward_logits(img)[class_id]`.
    pub fn class_activation(&mut self, img: &ImageTensor, class_id: usize) -> Result<f32> {
        self.check_class(class_id)?;
        Ok(self.forward_logits(img)[class_id])
    }

    /// Gradient of the class activation with respect to the pixels, same
    /// shape as the image, in pixel-count units.
    pub fn input_gradient(&mut self, img: &ImageTensor, class_id: usize) -> Result<Array3<f32>> {
        self.check_class(class_id)?;
        let batch = ImageTensor::batch(std::slice::from_ref(img));
        let _ = self.forward_batch(&batch, Mode::Eval);
        let mut onehot = Array2::zeros((1, self.num_classes()));
        onehot[[0, class_id]] = 1.0;
        let g = self.backward_from_logits(onehot, false);
        Ok(g.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Forward + gradient of the target-class activation in one pass, for
    /// attack loops. Returns (logits, pixel gradient).
    pub fn activation_gradient_batch(
        &mut self,
        batch: &Array4<f32>,
        class_id: usize,
    ) -> Result<(Array2<f32>, Array4<f32>)> {
        self.check_class(class_id)?;
        let logits = self.forward_batch(batch, Mode::Eval);
        let b = logits.dim().0;
        let mut onehot = Array2::zeros((b, self.num_classes()));
        for i in 0..b {
            onehot[[i, class_id]] = 1.0;
        }
        let g = self.backward_from_logits(onehot, false);
        Ok((logits, g))
    }

    /// Mean cross-entropy and its pixel gradient on a batch (evaluation
    /// mode); the inner loop of adversarial example generation.
    pub fn ce_gradient_batch(
        &mut self,
        batch: &Array4<f32>,
        labels: &[u8],
    ) -> (f32, Array4<f32>) {
        let logits = self.forward_batch(batch, Mode::Eval);
        let (ce, dlogits) = loss::softmax_cross_entropy(&logits.view(), labels);
        let g = self.backward_from_logits(dlogits, false);
        (ce, g)
    }

    /// Pooled final-conv feature vector; length is independent of input
    /// resolution.
    pub fn penultimate_features(&mut self, img: &ImageTensor) -> Array1<f32> {
        let batch = ImageTensor::batch(std::slice::from_ref(img));
        self.features_batch(&batch)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
    }

    /// Feature vectors for a batch, `[B, F]`.
    pub fn features_batch(&mut self, batch: &Array4<f32>) -> Array2<f32> {
        let f = self.body.forward(batch.clone(), Mode::Eval);
        let (b, c, h, w) = f.dim();
        debug_assert_eq!((h, w), (1, 1), "body must end in a pooled vector");
        f.into_shape_with_order((b, c)).unwrap()
    }

    pub fn feature_len(&mut self) -> usize {
        let s = self.arch.input_size();
        let zero = Array4::zeros((1, self.norm.channels(), s, s));
        self.features_batch(&zero).dim().1
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut nn::Param)) {
        self.body.visit_params_seq(f);
        self.head.visit_params_seq(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut ndarray::ArrayD<f32>)) {
        self.body.visit_buffers_seq(f);
        self.head.visit_buffers_seq(f);
    }

    pub fn zero_grads(&mut self) {
        self.body.zero_grads();
        self.head.zero_grads();
    }

    /// Concatenated copy of all parameter and buffer values, for
    /// frozen-model invariant checks.
    pub fn snapshot_params(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.value.iter().copied()));
        self.visit_buffers(&mut |b| out.extend(b.iter().copied()));
        out
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes() {
            return Err(Error::ClassId {
                class_id,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// Build a randomly initialized model. Deterministic under `seed`.
pub fn build_model(
    arch: &ArchitectureConfig,
    norm: NormalizationSpec,
    seed: u64,
) -> Result<ClassifierModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (body, head) = match *arch {
        ArchitectureConfig::WideResnet {
            depth,
            width,
            num_classes,
            ..
        } => build_wide_resnet(&mut rng, &norm, depth, width, num_classes),
        ArchitectureConfig::Vgg16Style { num_classes, .. } => {
            build_vgg16(&mut rng, &norm, num_classes)
        }
        ArchitectureConfig::Custom { .. } => {
            return Err(Error::config(
                "custom architectures must be assembled with from_networks",
            ))
        }
    };
    let mut model =
        ClassifierModel::from_networks(arch.clone(), norm, RegimeTag::Ttm, seed, body, head);
    log::info!(
        "built {} with {} parameters (seed {seed})",
        arch.short_name(),
        model.param_count()
    );
    Ok(model)
}

fn build_wide_resnet(
    rng: &mut ChaCha8Rng,
    norm: &NormalizationSpec,
    depth: usize,
    width: usize,
    num_classes: usize,
) -> (Sequential, Sequential) {
    let n = (depth - 4) / 6;
    let widths = [16, 16 * width, 32 * width, 64 * width];
    let mut layers: Vec<Box<dyn Layer>> = vec![
        Box::new(Normalize::new(norm.clone())),
        Box::new(Conv2d::new(init::conv_he(rng, widths[0], 3, 3), None, 1, 1)),
    ];
    let mut in_c = widths[0];
    for (group, &out_c) in widths[1..].iter().enumerate() {
        let stride = if group == 0 { 1 } else { 2 };
        for block in 0..n {
            let s = if block == 0 { stride } else { 1 };
            layers.push(Box::new(ResBlock::new(rng, in_c, out_c, s)));
            in_c = out_c;
        }
    }
    layers.push(Box::new(BatchNorm2d::new(in_c)));
    layers.push(Box::new(Relu::new()));
    layers.push(Box::new(GlobalAvgPool::new()));
    let body = Sequential::new(layers);

    let (w, b) = init::linear_uniform(rng, num_classes, in_c);
    let head = Sequential::new(vec![Box::new(Linear::new(w, b)) as Box<dyn Layer>]);
    (body, head)
}

fn build_vgg16(
    rng: &mut ChaCha8Rng,
    norm: &NormalizationSpec,
    num_classes: usize,
) -> (Sequential, Sequential) {
    const PLAN: [i32; 18] = [
        64, 64, -1, 128, 128, -1, 256, 256, 256, -1, 512, 512, 512, -1, 512, 512, 512, -1,
    ];
    let mut layers: Vec<Box<dyn Layer>> = vec![Box::new(Normalize::new(norm.clone()))];
    let mut in_c = 3usize;
    for &step in PLAN.iter() {
        if step < 0 {
            layers.push(Box::new(MaxPool2d::new(2)));
        } else {
            let out_c = step as usize;
            layers.push(Box::new(Conv2d::new(
                init::conv_he(rng, out_c, in_c, 3),
                Some(ndarray::Array1::zeros(out_c)),
                1,
                1,
            )));
            layers.push(Box::new(Relu::new()));
            in_c = out_c;
        }
    }
    layers.push(Box::new(GlobalAvgPool::new()));
    let body = Sequential::new(layers);

    // Replacement fully connected head sized for small inputs: two linear
    // layers on the pooled 512-vector.
    let (w1, b1) = init::linear_uniform(rng, 512, in_c);
    let (w2, b2) = init::linear_uniform(rng, num_classes, 512);
    let head = Sequential::new(vec![
        Box::new(Linear::new(w1, b1)) as Box<dyn Layer>,
        Box::new(Relu::new()),
        Box::new(Linear::new(w2, b2)),
    ]);
    (body, head)
}

/// A 2-class linear model `logits = [0, w.x + b]` over flattened pixels,
/// used by closed-form oracles.
pub fn linear_binary_model(
    weights: Array1<f32>,
    bias: f32,
    input_size: usize,
    channels: usize,
) -> ClassifierModel {
    let d = weights.len();
    assert_eq!(d, channels * input_size * input_size);
    let mut w = Array2::zeros((2, d));
    w.row_mut(1).assign(&weights);
    let b = ndarray::arr1(&[0.0, bias]);
    let body = Sequential::new(vec![
        Box::new(Normalize::new(NormalizationSpec::identity(channels))) as Box<dyn Layer>,
        Box::new(Flatten::new()),
    ]);
    let head = Sequential::new(vec![Box::new(Linear::new(w, b)) as Box<dyn Layer>]);
    ClassifierModel::from_networks(
        ArchitectureConfig::Custom {
            id: "linear-binary".into(),
            input_size,
            num_classes: 2,
        },
        NormalizationSpec::identity(channels),
        RegimeTag::Ttm,
        0,
        body,
        head,
    )
}
