//! Privacy metrics: cosine-similarity nearest neighbor in target-model
//! feature space, the L2 privacy loss against that neighbor, the minimum
//! adversarial perturbation radius, activation statistics, and the
//! robustness-vs-privacy trade-off table.

use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierModel;
use crate::data::{ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Mode;

/// Precomputed feature matrix over a dataset. Immutable after construction;
/// nearest-neighbor queries share it freely.
pub struct FeatureIndex {
    feats: Array2<f32>,
    norms: Vec<f64>,
}

impl FeatureIndex {
    /// Extract features for every image. Parallel over image chunks, each
    /// worker on its own model clone; results keep dataset order.
    pub fn build(model: &ClassifierModel, ds: &LabeledDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("feature index dataset".into()));
        }
        const CHUNK: usize = 64;
        let chunks: Vec<&[ImageTensor]> = ds.images.chunks(CHUNK).collect();
        let results: Vec<Array2<f32>> = chunks
            .into_par_iter()
            .map(|chunk| {
                let mut m = model.clone();
                let batch = ImageTensor::batch(chunk);
                m.features_batch(&batch)
            })
            .collect();
        let f = results[0].dim().1;
        let mut feats = Array2::zeros((ds.len(), f));
        let mut row = 0;
        for r in results {
            for i in 0..r.dim().0 {
                feats.row_mut(row).assign(&r.row(i));
                row += 1;
            }
        }
        let norms = feats
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
            .collect();
        Ok(FeatureIndex { feats, norms })
    }

    /// Build directly from a feature matrix (rows are items).
    pub fn from_features(feats: Array2<f32>) -> Self {
        let norms = feats
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
            .collect();
        FeatureIndex { feats, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Cosine nearest neighbor of a feature vector; ties break to the lowest
    /// index. Zero-norm vectors count as similarity 0. Accumulation runs in
    /// f64 so results match an independent double-loop oracle exactly.
    pub fn nearest(&self, query: &ndarray::Array1<f32>) -> (usize, f64) {
        let qn = query.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, row) in self.feats.rows().into_iter().enumerate() {
            let denom = qn * self.norms[i];
            let sim = if denom > 0.0 {
                row.iter()
                    .zip(query.iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>()
                    / denom
            } else {
                0.0
            };
            if sim > best.1 {
                best = (i, sim);
            }
        }
        best
    }

    /// f64 similarity against one row, for oracle comparisons.
    pub fn similarity_to(&self, query: &ndarray::Array1<f32>, i: usize) -> f64 {
        let qn = query.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let denom = qn * self.norms[i];
        if denom > 0.0 {
            self.feats
                .row(i)
                .iter()
                .zip(query.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                / denom
        } else {
            0.0
        }
    }
}

/// Cosine-similarity nearest training image of a reconstruction, measured in
/// the model's final-conv feature space.
pub fn feature_cosine_nn(
    model: &mut ClassifierModel,
    recon: &ImageTensor,
    train_set: &LabeledDataset,
) -> Result<(usize, f64)> {
    let index = FeatureIndex::build(model, train_set)?;
    let q = model.penultimate_features(recon);
    Ok(index.nearest(&q))
}

/// Raw Euclidean pixel distance between a reconstruction and its nearest
/// training image, in 0-255 units, unreduced. This is the privacy loss.
pub fn privacy_loss_l2(recon: &ImageTensor, nearest: &ImageTensor) -> Result<f32> {
    recon.l2_distance(nearest)
}

/// Search parameters for the minimum adversarial perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusConfig {
    /// Starting max-norm budget in pixel counts.
    pub eps_start: f32,
    /// Multiplicative budget growth until the attack succeeds.
    pub growth: f32,
    /// Hard budget cap; failures at the cap are censored, not dropped.
    pub eps_max: f32,
    /// Sign-gradient steps per trial.
    pub attack_iterations: u32,
    /// Bisection refinement rounds between the last failing and first
    /// succeeding budget.
    pub bisection_rounds: u32,
}

impl Default for RadiusConfig {
    fn default() -> Self {
        RadiusConfig {
            eps_start: 0.5,
            growth: 2.0,
            eps_max: 128.0,
            attack_iterations: 10,
            bisection_rounds: 8,
        }
    }
}

/// Outcome for one probe image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusOutcome {
    pub image_index: usize,
    /// L2 norm of the flipping perturbation, or of the max-budget attempt
    /// when censored.
    pub radius_l2: f32,
    pub censored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusReport {
    pub mean_radius_l2: f32,
    pub evaluated: usize,
    /// Inputs the model already misclassified (radius undefined).
    pub skipped: usize,
    pub censored: usize,
    pub outcomes: Vec<RadiusOutcome>,
    pub config: RadiusConfig,
}

/// Minimum-perturbation search: iterated sign-gradient attack under an
/// exponentially growing max-norm budget, bisection-refined, with the final
/// perturbation reported in L2. Misclassified inputs are skipped and
/// counted; failures at the cap are censored at the cap.
pub fn adversarial_radius(
    model: &ClassifierModel,
    images: &[ImageTensor],
    labels: &[u8],
    cfg: &RadiusConfig,
) -> Result<RadiusReport> {
    if images.is_empty() {
        return Err(Error::Empty("radius probe set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let work: Vec<(usize, &ImageTensor, u8)> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (i, img, labels[i]))
        .collect();
    let per_image: Vec<Option<RadiusOutcome>> = work
        .par_iter()
        .map(|&(i, img, label)| {
            let mut m = model.clone();
            radius_one(&mut m, img, label, cfg).map(|(radius_l2, censored)| RadiusOutcome {
                image_index: i,
                radius_l2,
                censored,
            })
        })
        .collect();

    let outcomes: Vec<RadiusOutcome> = per_image.into_iter().flatten().collect();
    let skipped = images.len() - outcomes.len();
    if outcomes.is_empty() {
        return Err(Error::Empty(
            "no correctly classified images to evaluate".into(),
        ));
    }
    let censored = outcomes.iter().filter(|o| o.censored).count();
    let mean = outcomes.iter().map(|o| o.radius_l2 as f64).sum::<f64>() / outcomes.len() as f64;
    Ok(RadiusReport {
        mean_radius_l2: mean as f32,
        evaluated: outcomes.len(),
        skipped,
        censored,
        outcomes,
        config: cfg.clone(),
    })
}

/// Returns None when the input is already misclassified.
fn radius_one(
    model: &mut ClassifierModel,
    img: &ImageTensor,
    label: u8,
    cfg: &RadiusConfig,
) -> Option<(f32, bool)> {
    let batch = ImageTensor::batch(std::slice::from_ref(img));
    let logits = model.forward_batch(&batch, Mode::Eval);
    if argmax(&logits) != label as usize {
        return None;
    }

    // grow the budget until the attack flips the prediction
    let mut eps = cfg.eps_start;
    let mut lo = 0.0f32;
    let mut success: Option<f32> = None;
    while eps <= cfg.eps_max {
        if let Some(l2) = attack_at(model, &batch, label, eps, cfg.attack_iterations) {
            success = Some(l2);
            break;
        }
        lo = eps;
        eps *= cfg.growth;
    }
    let Some(mut best_l2) = success else {
        // censored: report the displacement of the max-budget attempt
        let l2 = displacement_at(model, &batch, label, cfg.eps_max, cfg.attack_iterations);
        return Some((l2, true));
    };

    // bisection between the last failing and first succeeding budget
    let mut hi = eps;
    for _ in 0..cfg.bisection_rounds {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match attack_at(model, &batch, label, mid, cfg.attack_iterations) {
            Some(l2) => {
                hi = mid;
                best_l2 = l2;
            }
            None => lo = mid,
        }
    }
    Some((best_l2, false))
}

/// Run the attack at a fixed budget; on success return the L2 norm of the
/// flipping perturbation.
fn attack_at(
    model: &mut ClassifierModel,
    original: &Array4<f32>,
    label: u8,
    eps: f32,
    iterations: u32,
) -> Option<f32> {
    let step = (eps / 4.0).max(0.25);
    let mut x = original.clone();
    for _ in 0..iterations {
        let (_, grad) = model.ce_gradient_batch(&x, &[label]);
        ndarray::Zip::from(&mut x)
            .and(&grad)
            .and(original)
            .for_each(|v, &g, &o| {
                let stepped = *v + step * sign(g);
                let delta = (stepped - o).clamp(-eps, eps);
                *v = (o + delta).clamp(0.0, 255.0);
            });
        let logits = model.forward_batch(&x, Mode::Eval);
        if argmax(&logits) != label as usize {
            return Some(l2_of_delta(&x, original));
        }
    }
    None
}

fn displacement_at(
    model: &mut ClassifierModel,
    original: &Array4<f32>,
    label: u8,
    eps: f32,
    iterations: u32,
) -> f32 {
    let step = (eps / 4.0).max(0.25);
    let mut x = original.clone();
    for _ in 0..iterations {
        let (_, grad) = model.ce_gradient_batch(&x, &[label]);
        ndarray::Zip::from(&mut x)
            .and(&grad)
            .and(original)
            .for_each(|v, &g, &o| {
                let stepped = *v + step * sign(g);
                let delta = (stepped - o).clamp(-eps, eps);
                *v = (o + delta).clamp(0.0, 255.0);
            });
    }
    l2_of_delta(&x, original)
}

fn l2_of_delta(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
    (a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>())
    .sqrt() as f32
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

fn argmax(logits: &Array2<f32>) -> usize {
    logits
        .index_axis(ndarray::Axis(0), 0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Target-class activation of a reconstruction next to the training-set
/// average for that class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationStats {
    pub recon_activation: f32,
    pub train_avg_activation: f32,
}

pub fn activation_statistics(
    model: &mut ClassifierModel,
    recon: &ImageTensor,
    train_set: &LabeledDataset,
    class_id: u8,
) -> Result<ActivationStats> {
    let recon_activation = model.class_activation(recon, class_id as usize)?;
    let idx = train_set.indices_of_class(class_id);
    if idx.is_empty() {
        return Err(Error::Empty(format!("no training images of class {class_id}")));
    }
    let mut acc = 0.0f64;
    const CHUNK: usize = 128;
    for chunk in idx.chunks(CHUNK) {
        let imgs: Vec<_> = chunk.iter().map(|&i| train_set.images[i].clone()).collect();
        let batch = ImageTensor::batch(&imgs);
        let logits = model.forward_batch(&batch, Mode::Eval);
        for r in 0..chunk.len() {
            acc += logits[[r, class_id as usize]] as f64;
        }
    }
    Ok(ActivationStats {
        recon_activation,
        train_avg_activation: (acc / idx.len() as f64) as f32,
    })
}

/// One reconstruction's evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub model_id: String,
    pub attack_id: String,
    pub class_id: u8,
    pub seed: u64,
    pub nearest_train_index: usize,
    pub cosine_similarity: f32,
    pub privacy_loss_l2: f32,
    pub recon_activation: f32,
    pub train_avg_activation: f32,
}

/// Per-model aggregates over a set of evaluation records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model_id: String,
    pub attack_id: String,
    /// Hash of the attack configuration that produced the reconstructions;
    /// guards apples-to-apples comparisons.
    pub attack_config_hash: String,
    pub avg_max_similarity: f32,
    pub avg_privacy_loss_l2: f32,
    pub adversarial_radius: Option<f32>,
    pub records: usize,
}

/// Full privacy report: every record plus per-model aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PrivacyReport {
    pub records: Vec<EvaluationRecord>,
    pub aggregates: Vec<ModelAggregate>,
}

impl PrivacyReport {
    pub fn aggregate(
        records: &[EvaluationRecord],
        model_id: &str,
        attack_id: &str,
        attack_config_hash: &str,
        adversarial_radius: Option<f32>,
    ) -> ModelAggregate {
        let rs: Vec<&EvaluationRecord> = records
            .iter()
            .filter(|r| r.model_id == model_id && r.attack_id == attack_id)
            .collect();
        let n = rs.len().max(1) as f64;
        ModelAggregate {
            model_id: model_id.into(),
            attack_id: attack_id.into(),
            attack_config_hash: attack_config_hash.into(),
            avg_max_similarity: (rs.iter().map(|r| r.cosine_similarity as f64).sum::<f64>() / n)
                as f32,
            avg_privacy_loss_l2: (rs.iter().map(|r| r.privacy_loss_l2 as f64).sum::<f64>() / n)
                as f32,
            adversarial_radius,
            records: rs.len(),
        }
    }
}

/// The robustness-vs-privacy trade-off: one (adversarial radius, average
/// privacy loss) point per model, sorted by radius. All aggregates must come
/// from the same attack configuration.
pub fn tradeoff_curve(aggregates: &[ModelAggregate]) -> Result<Vec<(String, f32, f32)>> {
    if aggregates.is_empty() {
        return Err(Error::Empty("tradeoff aggregates".into()));
    }
    let h0 = &aggregates[0].attack_config_hash;
    if aggregates.iter().any(|a| &a.attack_config_hash != h0) {
        return Err(Error::config(
            "tradeoff curve requires identical attack configs across models",
        ));
    }
    let mut pts: Vec<(String, f32, f32)> = aggregates
        .iter()
        .map(|a| {
            a.adversarial_radius
                .ok_or_else(|| Error::Empty(format!("model {} has no radius", a.model_id)))
                .map(|r| (a.model_id.clone(), r, a.avg_privacy_loss_l2))
        })
        .collect::<Result<_>>()?;
    pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    Ok(pts)
}

/// Render the trade-off as delimited text ready for plotting.
pub fn tradeoff_table(points: &[(String, f32, f32)]) -> String {
    let mut out = String::from("model\tadversarial_radius_l2\tavg_privacy_loss_l2\n");
    for (id, r, p) in points {
        out.push_str(&format!("{id}\t{r:.4}\t{p:.4}\n"));
    }
    out
}
