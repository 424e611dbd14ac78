//! Standard and adversarial training loops plus accuracy evaluation.

mod optim;

pub use optim::{Optimizer, OptimizerKind};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierModel;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{loss, Mode};

/// One learning-rate segment: `lr` held for `epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSeg {
    pub epochs: u32,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Learning-rate schedule; segment epochs must sum to `epochs`.
    pub schedule: Vec<ScheduleSeg>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let total: u32 = self.schedule.iter().map(|s| s.epochs).sum();
        if total != self.epochs {
            return Err(Error::config(format!(
                "schedule epochs sum to {total}, expected {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.schedule.iter().any(|s| s.lr <= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u32) -> f32 {
        let mut acc = 0;
        for seg in &self.schedule {
            acc += seg.epochs;
            if epoch < acc {
                return seg.lr;
            }
        }
        self.schedule.last().map(|s| s.lr).unwrap_or(0.0)
    }
}

/// Inner-attack parameters for adversarial training: iterated sign-gradient
/// ascent with per-step projection onto the max-norm ball and pixel clipping.
/// All quantities are in pixel counts on the 0-255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub epsilon: f32,
    pub step_size: f32,
    pub attack_iterations: u32,
    /// Start the inner attack from a uniform random point in the ball
    /// instead of the clean image. Off by default.
    #[serde(default)]
    pub random_start: bool,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            epsilon: 10.0,
            step_size: 2.0,
            attack_iterations: 10,
            random_start: false,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::config("epsilon must be nonnegative"));
        }
        if self.step_size > self.epsilon && self.epsilon > 0.0 {
            return Err(Error::config("step_size must not exceed epsilon"));
        }
        if self.attack_iterations == 0 {
            return Err(Error::config("attack_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Per-epoch record written to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: Option<f32>,
    pub val_acc: Option<f32>,
}

/// Maximize the cross-entropy of `(images, labels)` under `model` with
/// iterated sign-gradient steps, staying within `epsilon` max-norm of the
/// input and inside `[0, 255]`.
///
/// `sign(0) = 0`, so a zero gradient (or `epsilon = 0`) returns the input
/// bit-for-bit.
pub fn generate_adversarial_batch(
    model: &mut ClassifierModel,
    images: &Array4<f32>,
    labels: &[u8],
    cfg: &AdvTrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Array4<f32> {
    let mut x = images.clone();
    if cfg.random_start {
        if let Some(rng) = rng {
            use rand::Rng;
            let eps = cfg.epsilon;
            x.zip_mut_with(images, |v, &orig| {
                *v = (orig + rng.gen_range(-eps..=eps)).clamp(0.0, 255.0);
            });
        }
    }
    for _ in 0..cfg.attack_iterations {
        let (_, grad) = model.ce_gradient_batch(&x, labels);
        ndarray::Zip::from(&mut x).and(&grad).and(images).for_each(|v, &g, &orig| {
            let stepped = *v + cfg.step_size * sign(g);
            let delta = (stepped - orig).clamp(-cfg.epsilon, cfg.epsilon);
            *v = (orig + delta).clamp(0.0, 255.0);
        });
    }
    x
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Standard training. Returns per-epoch metrics; the model is trained in
/// place. `epoch_hook` runs after every epoch (checkpointing etc.).
pub fn train_standard(
    model: &mut ClassifierModel,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    epoch_hook: &mut dyn FnMut(u32, &mut ClassifierModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    train_loop(model, train, val, cfg, None, epoch_hook)
}

/// Adversarial training: every optimizer step consumes adversarial batches
/// generated against the current parameters. With `epsilon = 0` this is
/// bit-for-bit identical to [`train_standard`] under the same seed.
pub fn train_adversarial(
    model: &mut ClassifierModel,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    adv: &AdvTrainConfig,
    epoch_hook: &mut dyn FnMut(u32, &mut ClassifierModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    adv.validate()?;
    train_loop(model, train, val, cfg, Some(adv), epoch_hook)
}

fn train_loop(
    model: &mut ClassifierModel,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    adv: Option<&AdvTrainConfig>,
    epoch_hook: &mut dyn FnMut(u32, &mut ClassifierModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.momentum,
        cfg.weight_decay,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5a5a));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xa77ac4));
    let mut metrics = Vec::with_capacity(cfg.epochs as usize);

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;

        for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<_> = batch_idx.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<u8> = batch_idx.iter().map(|&i| train.labels[i]).collect();
            let clean = crate::data::ImageTensor::batch(&imgs);

            let batch = match adv {
                Some(a) => {
                    generate_adversarial_batch(model, &clean, &labels, a, Some(&mut attack_rng))
                }
                None => clean,
            };

            let logits = model.forward_batch(&batch, Mode::Train);
            let (ce, dlogits) = loss::softmax_cross_entropy(&logits.view(), &labels);
            if !ce.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            model.zero_grads();
            model.backward_from_logits(dlogits, true);
            optimizer.step(model, lr);
            epoch_loss += ce as f64;
            batches += 1;
        }

        model.epochs_trained = epoch + 1;
        let (train_loss_eval, train_acc) = evaluate(model, train)?;
        let (val_loss, val_acc) = match val {
            Some(v) => {
                let (l, a) = evaluate(model, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: if batches > 0 {
                (epoch_loss / batches as f64) as f32
            } else {
                train_loss_eval
            },
            train_acc,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {:3}: lr {:.4} train loss {:.4} acc {:.3} val acc {:?}",
            m.epoch,
            lr,
            m.train_loss,
            m.train_acc,
            m.val_acc
        );
        metrics.push(m);
        epoch_hook(epoch + 1, model)?;
    }
    Ok(metrics)
}

/// Top-1 accuracy on a dataset. Errors on an empty dataset.
pub fn evaluate_accuracy(model: &mut ClassifierModel, ds: &LabeledDataset) -> Result<f32> {
    Ok(evaluate(model, ds)?.1)
}

/// Mean loss and top-1 accuracy, batched in evaluation mode.
pub fn evaluate(model: &mut ClassifierModel, ds: &LabeledDataset) -> Result<(f32, f32)> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    const EVAL_BATCH: usize = 128;
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(ds.len());
        let imgs: Vec<_> = ds.images[start..end].to_vec();
        let labels = &ds.labels[start..end];
        let batch = crate::data::ImageTensor::batch(&imgs);
        let logits = model.forward_batch(&batch, Mode::Eval);
        let preds = loss::predictions(&logits.view());
        for (p, &l) in preds.iter().zip(labels.iter()) {
            if *p == l as usize {
                correct += 1;
            }
        }
        let per = loss::cross_entropy_per_sample(&logits.view(), labels);
        loss_sum += per.iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok((
        (loss_sum / ds.len() as f64) as f32,
        correct as f32 / ds.len() as f32,
    ))
}

/// No-op epoch hook.
pub fn no_hook() -> impl FnMut(u32, &mut ClassifierModel) -> Result<()> {
    |_, _| Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{build_model, linear_binary_model, ArchitectureConfig};
    use crate::data::{synth, NormalizationSpec, Split};
    use ndarray::Array1;
    use rand::Rng;

    fn desk_cfg(epochs: u32, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            schedule: vec![ScheduleSeg { epochs, lr: 0.05 }],
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 16,
            epochs,
            seed,
        }
    }

    fn micro_dataset(n: usize) -> LabeledDataset {
        let full = synth::generate_split(3, Split::Train, n);
        let images = full.images.iter().map(|i| crate::data::downscale_avg(i, 2)).collect();
        LabeledDataset::new(images, full.labels, Split::Train, full.source_indices).unwrap()
    }

    #[test]
    fn schedule_must_sum_to_epochs() {
        let mut cfg = desk_cfg(5, 0);
        cfg.schedule = vec![ScheduleSeg { epochs: 3, lr: 0.1 }];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn epsilon_zero_attack_is_identity() {
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            1,
        )
        .unwrap();
        let ds = micro_dataset(8);
        let batch = crate::data::ImageTensor::batch(&ds.images);
        let cfg = AdvTrainConfig {
            epsilon: 0.0,
            step_size: 0.0,
            attack_iterations: 3,
            random_start: false,
        };
        let adv = generate_adversarial_batch(&mut model, &batch, &ds.labels, &cfg, None);
        assert_eq!(adv, batch, "epsilon 0 must return the input unchanged");
    }

    #[test]
    fn adversarial_batch_respects_ball_and_range() {
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            2,
        )
        .unwrap();
        let ds = micro_dataset(8);
        let batch = crate::data::ImageTensor::batch(&ds.images);
        let cfg = AdvTrainConfig {
            epsilon: 10.0,
            step_size: 2.0,
            attack_iterations: 10,
            random_start: false,
        };
        let adv = generate_adversarial_batch(&mut model, &batch, &ds.labels, &cfg, None);
        let max_dev = adv
            .iter()
            .zip(batch.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev <= 10.0 + 1e-4, "max-norm bound violated: {max_dev}");
        assert!(adv.iter().all(|&v| (0.0..=255.0).contains(&v)));
        // ascent property: adversarial loss >= clean loss
        let (clean_loss, _) = model.ce_gradient_batch(&batch, &ds.labels);
        let (adv_loss, _) = model.ce_gradient_batch(&adv, &ds.labels);
        assert!(
            adv_loss >= clean_loss,
            "attack should not reduce the loss: {adv_loss} < {clean_loss}"
        );
    }

    #[test]
    fn linear_model_attack_reaches_eps_sign_w() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let d = 3 * 8 * 8;
        let w = Array1::from_shape_fn(d, |_| rng.gen_range(-0.005f32..0.005));
        let mut model = linear_binary_model(w.clone(), 0.0, 8, 3);
        let base = ndarray::Array4::from_elem((1, 3, 8, 8), 128.0f32);
        // label 1: ascent on CE(label=1) pushes down w.x, i.e. along -sign(w)
        let cfg = AdvTrainConfig {
            epsilon: 10.0,
            step_size: 2.0,
            attack_iterations: 10,
            random_start: false,
        };
        let adv = generate_adversarial_batch(&mut model, &base, &[1], &cfg, None);
        for (i, (&a, &b)) in adv.iter().zip(base.iter()).enumerate() {
            let expected = b - 10.0 * sign(w[i]);
            assert!(
                (a - expected).abs() < 1e-3,
                "pixel {i}: {a} vs expected {expected}"
            );
        }
    }

    #[test]
    fn micro_dataset_overfits_to_full_accuracy() {
        let ds = micro_dataset(32);
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            schedule: vec![ScheduleSeg { epochs: 40, lr: 1e-3 }],
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 40,
            seed: 7,
        };
        let metrics =
            train_standard(&mut model, &ds, None, &cfg, &mut no_hook()).unwrap();
        let final_acc = metrics.last().unwrap().train_acc;
        assert!(
            final_acc >= 0.999,
            "micro dataset should be memorized, got {final_acc}"
        );
        assert_eq!(evaluate_accuracy(&mut model, &ds).unwrap(), 1.0);
    }

    #[test]
    fn eps0_adversarial_equals_standard_bit_for_bit() {
        let ds = micro_dataset(24);
        let cfg = desk_cfg(2, 99);
        let adv0 = AdvTrainConfig {
            epsilon: 0.0,
            step_size: 0.0,
            attack_iterations: 2,
            random_start: false,
        };
        let arch = ArchitectureConfig::wide_resnet(10, 1, 16);
        let mut a = build_model(&arch, NormalizationSpec::symmetric(3), 5).unwrap();
        let mut b = build_model(&arch, NormalizationSpec::symmetric(3), 5).unwrap();
        train_standard(&mut a, &ds, None, &cfg, &mut no_hook()).unwrap();
        train_adversarial(&mut b, &ds, None, &cfg, &adv0, &mut no_hook()).unwrap();
        let pa = a.snapshot_params();
        let pb = b.snapshot_params();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "parameter trajectories diverged");
        }
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_set() {
        let ds = micro_dataset(40);
        // zeroed model predicts class 0 everywhere (argmax of all-zero logits)
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            1,
        )
        .unwrap();
        model.visit_params(&mut |p| p.value.fill(0.0));
        let acc = evaluate_accuracy(&mut model, &ds).unwrap();
        assert!((acc - 0.1).abs() < 1e-6, "constant class on balanced 10-class set");
    }

    #[test]
    fn empty_dataset_is_error() {
        let ds = LabeledDataset::new(vec![], vec![], Split::Train, vec![]).unwrap();
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            1,
        )
        .unwrap();
        assert!(matches!(
            evaluate_accuracy(&mut model, &ds),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn training_is_reproducible_under_seed() {
        let ds = micro_dataset(24);
        let cfg = desk_cfg(2, 4);
        let arch = ArchitectureConfig::wide_resnet(10, 1, 16);
        let mut a = build_model(&arch, NormalizationSpec::symmetric(3), 4).unwrap();
        let mut b = build_model(&arch, NormalizationSpec::symmetric(3), 4).unwrap();
        let ma = train_standard(&mut a, &ds, None, &cfg, &mut no_hook()).unwrap();
        let mb = train_standard(&mut b, &ds, None, &cfg, &mut no_hook()).unwrap();
        assert_eq!(
            ma.last().unwrap().train_acc,
            mb.last().unwrap().train_acc
        );
    }
}
