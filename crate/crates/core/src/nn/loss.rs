//! Loss functions. Each returns the scalar loss (mean over the batch) and
//! the gradient with respect to its first argument.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Row-wise softmax. Internals run in f64 so tail probabilities stay
/// nonzero deep into saturation (sign-gradient attacks depend on this).
pub fn softmax(logits: &ArrayView2<f32>) -> Array2<f64> {
    let (b, k) = logits.dim();
    let mut p = Array2::<f64>::zeros((b, k));
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let m = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v as f64) - m).exp();
            p[[i, j]] = e;
            sum += e;
        }
        for j in 0..k {
            p[[i, j]] /= sum;
        }
    }
    p
}

/// Mean cross-entropy of logits against integer labels, with gradient
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(
    logits: &ArrayView2<f32>,
    labels: &[u8],
) -> (f32, Array2<f32>) {
    let b = logits.dim().0;
    assert_eq!(b, labels.len());
    let p = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad64 = p.clone();
    let inv_b = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let li = label as usize;
        loss -= (p[[i, li]].max(1e-300)).ln();
        grad64[[i, li]] -= 1.0;
    }
    let grad = grad64.mapv(|g| (g * inv_b) as f32);
    ((loss * inv_b) as f32, grad)
}

/// Per-sample cross-entropy values (no reduction), for diagnostics.
pub fn cross_entropy_per_sample(logits: &ArrayView2<f32>, labels: &[u8]) -> Array1<f32> {
    let p = softmax(logits);
    Array1::from_shape_fn(labels.len(), |i| {
        -(p[[i, labels[i] as usize]].max(1e-300)).ln() as f32
    })
}

/// Mean binary cross-entropy on raw scores with a shared target, numerically
/// stable form. Gradient is `(sigmoid(s) - t) / B`.
pub fn bce_with_logits(scores: &ArrayView1<f32>, target: f32) -> (f32, Array1<f32>) {
    let b = scores.len();
    let inv_b = 1.0 / b as f32;
    let mut loss = 0.0f32;
    let mut grad = Array1::zeros(b);
    for (i, &s) in scores.iter().enumerate() {
        // max(s,0) - s*t + ln(1 + exp(-|s|))
        loss += s.max(0.0) - s * target + (1.0 + (-s.abs()).exp()).ln();
        let sig = 1.0 / (1.0 + (-s).exp());
        grad[i] = (sig - target) * inv_b;
    }
    (loss * inv_b, grad)
}

/// argmax per row.
pub fn predictions(logits: &ArrayView2<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = arr2(&[[0.0f32; 10]]);
        let (loss, _) = softmax_cross_entropy(&logits.view(), &[3]);
        assert!((loss - (10.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = arr2(&[[0.3f32, -0.2, 1.1], [0.0, 0.5, -0.5]]);
        let labels = [2u8, 0];
        let (_, grad) = softmax_cross_entropy(&logits.view(), &labels);
        let eps = 1e-3f32;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += eps;
                let mut lm = logits.clone();
                lm[[i, j]] -= eps;
                let (fp, _) = softmax_cross_entropy(&lp.view(), &labels);
                let (fm, _) = softmax_cross_entropy(&lm.view(), &labels);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((grad[[i, j]] - fd).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn bce_chance_level_is_ln2() {
        let scores = ndarray::arr1(&[0.0f32, 0.0, 0.0]);
        let (loss, _) = bce_with_logits(&scores.view(), 1.0);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
